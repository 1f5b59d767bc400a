"""Train the demo net briefly, then compute a streamed saliency map for one motif image.

Saves the image and its map as STEN1 tensors and reports how much of the
saliency mass falls on the motif cells.

    python3 scripts/saliency_demo.py --epochs 20 --outdir saliency_out
"""

import argparse
import json
from pathlib import Path

import numpy as np

from streamcnn.demo import MotifDataConfig, batches, motif_dataset, train_step
from streamcnn.network import bundled_spec, init_network
from streamcnn.streaming import plan_grid, saliency
from streamcnn.tensor_core import save_tensor


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--lr", type=float, default=0.01)
    ap.add_argument("--index", type=int, default=0, help="dataset image to explain")
    ap.add_argument("--outdir", default="saliency_out")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    data = MotifDataConfig(seed=args.seed)
    x, y = motif_dataset(data)
    spec = bundled_spec("demo")
    net = init_network(spec, (4,) + x.shape[1:], seed=args.seed)
    plan = plan_grid(spec, x.shape[2:], 2)
    for epoch in range(args.epochs):
        for idx in batches(len(y), 4, np.random.default_rng([args.seed, epoch])):
            net, _, _ = train_step(net, x[idx], y[idx], plan, args.lr)

    img = x[args.index : args.index + 1]
    sal_plan = plan_grid(spec, x.shape[2:], 2, input_grad=True)
    sal = saliency(net, img, sal_plan, int(y[args.index]))

    # motif cells are where the clean image departs from the noise floor
    clean, _ = motif_dataset(MotifDataConfig(n_images=data.n_images, seed=args.seed, noise=0.0))
    motif = np.abs(clean[args.index]).max(axis=0) > 0
    share = float(sal[0][motif].sum() / max(sal[0].sum(), 1e-30))

    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)
    save_tensor(out / "image.sten", img)
    save_tensor(out / "saliency.sten", sal)
    print(json.dumps({"label": int(y[args.index]), "motif_area": float(motif.mean()), "saliency_on_motifs": share, "n_tiles": sal_plan.n_tiles}))


if __name__ == "__main__":
    main()
