"""Writes baseline.json and improved.json: mock scripts whose self-scores
come from a fixed ladder of 100 levels. Both scripts pick the same
alternative for a given request, and the improved ladder sits 0.08 above
the baseline ladder at every level."""
import json

LEVELS = 100


def ladder(shift):
    return [round(min(0.99, 0.03 + 0.9 * (k / (LEVELS - 1)) ** 1.5 + shift), 6) for k in range(LEVELS)]


def script(shift):
    alts = [f"That sounds hard. What would help most right now? (variant {k:03d})" for k in range(LEVELS)]
    return {
        "rules": [{"contains": f"(variant {k:03d})", "p_true": p} for k, p in enumerate(ladder(shift))],
        "default_p_true": 0.3,
        "default_generations": [
            {
                "appropriate": False,
                "goal_alignment": "Invite the seeker to name what they need.",
                "areas_for_improvement": ["Questions"],
                "alternative": a,
            }
            for a in alts
        ],
    }


for name, shift in [("baseline", 0.0), ("improved", 0.08)]:
    with open(f"{name}.json", "w") as f:
        json.dump(script(shift), f, indent=1)
        f.write("\n")
