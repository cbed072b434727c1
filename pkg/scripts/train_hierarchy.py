#!/usr/bin/env python3
"""Train box embeddings on the bundled two-domain class hierarchy and report
how many subclass pairs end up geometrically nested.

With the default settings every run reaches full containment; lowering the
epoch count or raising the regularizer weights shows partial nesting.
"""

import argparse

import numpy as np

from boxkg.checkpoint import checkpoint_for_gnn, save_checkpoint
from boxkg.gnn import init_model
from boxkg.synthetic import hierarchy_demo_graph
from boxkg.training import JointTrainConfig, containment_fraction, train_joint


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=800)
    ap.add_argument("--kind", choices=("distance", "overlap"), default="distance")
    ap.add_argument("--lr", type=float, default=0.05)
    ap.add_argument("--beta-neg", type=float, default=0.0,
                    help="disjoint-sibling penalty weight")
    ap.add_argument("--checkpoint", metavar="PATH", help="save the trained model")
    args = ap.parse_args()

    g = hierarchy_demo_graph(seed=args.seed)
    model = init_model(g, depth=1, seed=args.seed)
    cfg = JointTrainConfig(
        epochs=args.epochs,
        initial_lr=args.lr,
        lr_decay=0.002,
        reg_lambda=0.0,
        small_box_lambda=0.0,
        beta_neg=args.beta_neg,
        gamma_random=0.0,
    )
    model, history = train_joint(
        g, model, cfg, kind=args.kind, seed=args.seed
    )

    for ep in history:
        if ep.epoch % max(1, args.epochs // 10) == 0 or ep.epoch == args.epochs - 1:
            print(f"epoch {ep.epoch:4d}  total {ep.total:.6f}  lr {ep.lr:.4f}")

    mean_pos = float(np.mean([r.pos_per_class for r in history[-1].rows]))
    frac = containment_fraction(model, g)
    print(f"\nfinal mean positive loss {mean_pos:.2e}")
    print(f"nested subclass pairs: {frac:.1%}")

    if args.checkpoint:
        save_checkpoint(args.checkpoint, checkpoint_for_gnn(model))
        print(f"wrote {args.checkpoint}")


if __name__ == "__main__":
    main()
