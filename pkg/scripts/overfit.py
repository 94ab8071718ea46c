"""Overfit the desk model on 32 training expressions and report Acc@0.25 / Acc@0.5 on those same rows."""

import argparse
import json

from mono3dvg.experiments import overfit_config, run_overfit


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default="runs/overfit")
    p.add_argument("--n", type=int, default=32)
    p.add_argument("--max-steps", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float)
    args = p.parse_args()
    cfg = overfit_config(args.max_steps, args.seed, args.n)
    if args.lr is not None:
        cfg.optim.lr = args.lr
    rep = run_overfit(args.out, args.n, cfg, verbose=True)
    print(json.dumps({"acc@0.25": rep.acc25, "acc@0.5": rep.acc50, "steps": rep.steps,
                      "minutes": round(rep.seconds / 60, 1), "passed": rep.passed(args.max_steps)}))


if __name__ == "__main__":
    main()
