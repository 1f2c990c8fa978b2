"""Calibration run for the end-to-end refinement suite.

For each phantom seed, scans corruption seeds until the corrupted initial
segmentation lands inside the target dice band, then freezes the
(phantom seed, corruption seed, achieved dice) triples into
tests/fixtures/e2e_calibration.json.  Rerun only to recalibrate; the
committed fixture is what the acceptance suite replays.
"""

import dataclasses
import json
import pathlib

from scribbleseg import CorruptionSpec, PhantomSpec, corrupt_segmentation, dice, make_phantom

BAND = (0.52, 0.68)  # safety margin inside the acceptance band [0.5, 0.7]
N_CASES = 20
PHANTOM = PhantomSpec(dims=(32, 32, 32), blobs=2, radius=(4.0, 7.0), contrast=0.6, noise=0.05)
CORRUPTION = CorruptionSpec(boundary_amplitude=2.2, drop_prob=0.25, false_positive_blobs=1, sharpness=1.0)


def main() -> None:
    cases = []
    for phantom_seed in range(N_CASES):
        _, gt = make_phantom(dataclasses.replace(PHANTOM, seed=phantom_seed))
        for corruption_seed in range(1000 + 100 * phantom_seed, 1000 + 100 * phantom_seed + 100):
            labels, _ = corrupt_segmentation(gt, dataclasses.replace(CORRUPTION, seed=corruption_seed))
            score = dice(labels, gt)
            if BAND[0] <= score <= BAND[1]:
                cases.append(
                    {
                        "phantom_seed": phantom_seed,
                        "corruption_seed": corruption_seed,
                        "initial_dice": round(score, 4),
                    }
                )
                print(f"phantom {phantom_seed}: corruption seed {corruption_seed} dice {score:.4f}")
                break
        else:
            raise RuntimeError(f"no corruption seed found for phantom {phantom_seed}")

    fixture = {
        "phantom": {k: v for k, v in dataclasses.asdict(PHANTOM).items() if k != "seed"},
        "corruption": {k: v for k, v in dataclasses.asdict(CORRUPTION).items() if k != "seed"},
        "dice_band": [0.5, 0.7],
        "cases": cases,
    }
    out = pathlib.Path(__file__).resolve().parent.parent / "tests" / "fixtures" / "e2e_calibration.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(fixture, indent=2) + "\n")
    print(f"wrote {out} ({len(cases)} cases)")


if __name__ == "__main__":
    main()
