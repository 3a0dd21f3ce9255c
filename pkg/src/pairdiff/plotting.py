"""Static sample grids rendered with matplotlib."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .corpus import PairedSample  # noqa: E402


def sample_grid(samples: list[PairedSample], path, title: str = "", columns: int = 8) -> Path:
    """Image row above mask row for each sample; at most ``columns`` pairs per band."""
    if not samples:
        raise ValueError("no samples to plot")
    path = Path(path)
    n = len(samples)
    cols = min(columns, n)
    bands = -(-n // cols)
    fig, axes = plt.subplots(2 * bands, cols, figsize=(1.3 * cols, 2.6 * bands + 0.4), squeeze=False)
    for ax in axes.flat:
        ax.axis("off")
    vmax = max(int(s.mask.max()) for s in samples) or 1
    for i, s in enumerate(samples):
        r, c = 2 * (i // cols), i % cols
        axes[r, c].imshow(s.image.mean(axis=0), cmap="gray", vmin=0, vmax=1)
        axes[r, c].set_title(s.prompt.target_label or "null", fontsize=7)
        axes[r + 1, c].imshow(s.mask, cmap="viridis", vmin=0, vmax=vmax, interpolation="nearest")
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path
