import argparse
import sys

import numpy as np
import pandas as pd

from pbmbandits.core.model import PbmModel, get_preset


def parse_args(args):
    parser = argparse.ArgumentParser(
        description="Write a synthetic raw click log `user_id,query_id,arm_id,position,click`"
    )
    parser.add_argument(
        "--queries",
        type=int,
        default=10,
        help="The number of queries; each gets a shuffled, rescaled copy of the preset theta",
    )
    parser.add_argument(
        "--sessions",
        type=int,
        default=20_000,
        help="The number of displayed lists per query",
    )
    parser.add_argument("--preset", default="synthetic", help="The model preset to start from")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--output", required=True, help="The CSV file to write")
    return parser.parse_args(args)


def _query_model(base: PbmModel, rng: np.random.Generator) -> PbmModel:
    theta = np.clip(np.asarray(base.theta) * rng.uniform(0.5, 1.5), 1e-3, 1 - 1e-3)
    return PbmModel(theta=tuple(rng.permutation(theta)), kappa=base.kappa)


def generate_click_log(args):
    args = parse_args(args)
    rng = np.random.default_rng(args.seed)
    base = get_preset(args.preset)
    frames = []
    for q in range(args.queries):
        model = _query_model(base, rng)
        # uniformly random displayed lists so every (arm, position) cell gets impressions
        arms = np.argsort(rng.random((args.sessions, model.num_arms)), axis=1)
        arms = arms[:, : model.num_positions]
        attraction = np.asarray(model.theta)[arms] * np.asarray(model.kappa)
        clicks = (rng.random(arms.shape) < attraction).astype(int)
        frames.append(
            pd.DataFrame(
                {
                    "user_id": np.repeat(np.arange(args.sessions), model.num_positions),
                    "query_id": f"q{q}",
                    "arm_id": [f"ad{arm}" for arm in arms.ravel()],
                    "position": np.tile(np.arange(1, model.num_positions + 1), args.sessions),
                    "click": clicks.ravel(),
                }
            )
        )
    log = pd.concat(frames, ignore_index=True)
    log.to_csv(args.output, index=False)
    sys.stderr.write(f"Wrote {len(log)} impressions for {args.queries} queries to {args.output}\n")


if __name__ == "__main__":
    generate_click_log(sys.argv[1:])
