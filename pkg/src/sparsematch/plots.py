"""Match-plot SVG writer and matplotlib report figures.

The correspondence plot is written as plain SVG with one <line> element
per visible keypoint so downstream tools can inspect matches without a
renderer. Report figures (loss curves, PCK curves, fusion and memory
bars) go through matplotlib's Agg backend into PNG files next to the
delimited report output.
"""

from __future__ import annotations

import xml.etree.ElementTree as ET

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

CORRECT_COLOR = "#2ca02c"
WRONG_COLOR = "#d62728"
NEUTRAL_COLOR = "#7f7f7f"


def write_match_svg(path, src_kps, pred_points, image_size, gt_points=None,
                    alpha: float = 0.1, title: str = ""):
    """Two-panel correspondence plot.

    Draws the source panel on the left with its keypoints, the target
    panel on the right with predicted locations, and one line per visible
    keypoint. With ground truth, lines are green when the prediction is
    PCK-correct at `alpha` (image reference) and red otherwise; without
    ground truth all lines use a neutral color.
    """
    h, w = image_size
    gap = max(16, w // 8)
    width = 2 * w + gap
    svg = ET.Element("svg", xmlns="http://www.w3.org/2000/svg",
                     width=str(width), height=str(h),
                     viewBox=f"0 0 {width} {h}")
    ET.SubElement(svg, "rect", x="0", y="0", width=str(w), height=str(h),
                  fill="#f4f4f4", stroke="#333333")
    ET.SubElement(svg, "rect", x=str(w + gap), y="0", width=str(w), height=str(h),
                  fill="#f4f4f4", stroke="#333333")
    if title:
        ET.SubElement(svg, "title").text = title

    src_pts = np.asarray(src_kps.visible_points(), dtype=float)
    pred = np.asarray(pred_points, dtype=float)
    threshold = None
    gt = None
    if gt_points is not None:
        gt = np.asarray(gt_points, dtype=float)
        threshold = alpha * max(h, w)

    for i, ((sx, sy), (px, py)) in enumerate(zip(src_pts, pred)):
        if gt is not None:
            ok = float(np.hypot(px - gt[i, 0], py - gt[i, 1])) < threshold
            color = CORRECT_COLOR if ok else WRONG_COLOR
        else:
            color = NEUTRAL_COLOR
        tx = px + w + gap
        ET.SubElement(svg, "line", x1=f"{sx:.2f}", y1=f"{sy:.2f}",
                      x2=f"{tx:.2f}", y2=f"{py:.2f}",
                      stroke=color, attrib={"stroke-width": "1.2"})
        ET.SubElement(svg, "circle", cx=f"{sx:.2f}", cy=f"{sy:.2f}", r="2.0",
                      fill=color)
        ET.SubElement(svg, "circle", cx=f"{tx:.2f}", cy=f"{py:.2f}", r="2.0",
                      fill=color)
        if gt is not None:
            ET.SubElement(svg, "circle", cx=f"{gt[i, 0] + w + gap:.2f}",
                          cy=f"{gt[i, 1]:.2f}", r="1.4", fill="none",
                          stroke="#1f77b4", attrib={"stroke-width": "0.8"})
    ET.ElementTree(svg).write(path, xml_declaration=True, encoding="unicode")


def save_loss_curve(path, history):
    """Loss (and PCK when present) against epochs."""
    epochs = [h["epoch"] for h in history]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [h["loss"] for h in history], marker="o", label="loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean coordinate loss (px)")
    if any("pck" in h for h in history):
        ax2 = ax.twinx()
        ax2.plot(epochs, [h.get("pck", np.nan) for h in history],
                 marker="s", color="tab:green", label="PCK")
        ax2.set_ylabel("PCK", color="tab:green")
        ax2.set_ylim(0, 1.05)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_pck_curve(path, alphas, values, label="aggregate"):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(alphas, values, marker="o")
    ax.set_xlabel("alpha")
    ax.set_ylabel("PCK")
    ax.set_ylim(0, 1.05)
    ax.set_title(label)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_fusion_bars(path, report):
    sizes = sorted(report.per_resolution)
    labels = [f"{h}x{w}" for h, w in sizes]
    fracs = [report.fused_fraction(s) for s in sizes]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(labels, fracs, color="tab:blue")
    ax.set_xlabel("feature map size")
    ax.set_ylabel("fused keypoint fraction")
    ax.set_ylim(0, max(fracs + [0.01]) * 1.25)
    for x, f in zip(labels, fracs):
        ax.text(x, f, f"{f:.3f}", ha="center", va="bottom", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_memory_bars(path, reports):
    labels = [r.label for r in reports]
    elements = [r.tape_elements for r in reports]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(labels, elements, color=["tab:red", "tab:orange", "tab:green"][: len(labels)])
    ax.set_ylabel("recorded tape elements")
    ax.set_yscale("log")
    for x, e in zip(labels, elements):
        ax.text(x, e, f"{e:,}", ha="center", va="bottom", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
