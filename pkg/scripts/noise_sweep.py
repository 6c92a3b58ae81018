"""Grid-snap onset F1 as a function of onset jitter, with the Gaussian-tail prediction.

    python scripts/noise_sweep.py --pieces 50
"""
import argparse
import json
import math

from beatquant.experiments import baseline_scores
from beatquant.synth import SynthConfig, generate_corpus


def predicted_hit_rate(sigma: float) -> float:
    # a jittered onset snaps back iff |jitter| < 1/24 beat
    if sigma == 0:
        return 1.0
    return math.erf((1 / 24) / (sigma * math.sqrt(2)))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--pieces", type=int, default=50)
    ap.add_argument("--seed", type=int, default=200)
    ap.add_argument("--sigmas", default="0,0.01,0.02,0.03,0.05,0.08")
    args = ap.parse_args()
    for sigma in map(float, args.sigmas.split(",")):
        pieces = generate_corpus(SynthConfig(seed=args.seed, onset_jitter_sigma_beats=sigma), args.pieces)
        scores = baseline_scores(pieces)
        print(json.dumps({"sigma": sigma, "predicted_f1": round(predicted_hit_rate(sigma), 4),
                          **{k: round(v, 4) for k, v in scores.items()}}))


if __name__ == "__main__":
    main()
