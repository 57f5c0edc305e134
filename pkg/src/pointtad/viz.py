"""Per-layer query point trajectories as JSON and a static SVG timeline."""

from __future__ import annotations

import xml.etree.ElementTree as ET

import numpy as np

from . import autograd as ag
from .data import Clip, sliding_windows

_PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
            "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


def point_trajectories(detector, clip: Clip, window_frames: int) -> dict:
    """Point positions of every query before the first layer and after each layer.

    Positions are in clip-normalised time. ``snapshots`` has L+1 entries per
    query; ``segments`` has one pseudo segment per layer.
    """
    model = detector.model_
    cfg = model.config
    T = clip.n_frames
    to_clip = lambda w, t: ((w.start_frame + np.asarray(t) * window_frames) / T).tolist()  # noqa: E731
    windows = []
    for w in sliding_windows(clip, window_frames, 0.0):
        with ag.no_grad():
            out = model.forward(w.features[None])
        final = out.layers[-1].class_logits.data[0]
        prob = np.exp(final - final.max(axis=-1, keepdims=True))
        prob /= prob.sum(axis=-1, keepdims=True)
        queries = []
        for q in range(cfg.n_queries):
            snaps = [out.init_points[q]] + [layer.points.data[0, q] for layer in out.layers]
            c = int(np.argmax(prob[q, :-1]))
            queries.append({
                "query": q,
                "class_id": c,
                "score": float(prob[q, c]),
                "snapshots": [to_clip(w, s) for s in snaps],
                "segments": [to_clip(w, layer.segments.data[0, q]) for layer in out.layers],
            })
        windows.append({"start_frame": w.start_frame, "queries": queries})
    if cfg.representation == "points":
        mask = model.local_mask.tolist()
    else:
        mask = [True, True]
    return {
        "clip_id": clip.clip_id,
        "n_frames": T,
        "window_frames": window_frames,
        "n_layers": cfg.n_layers,
        "representation": cfg.representation,
        "local_mask": [bool(m) for m in mask],
        "windows": windows,
        "ground_truth": [a.to_dict() for a in clip.instances],
    }


def render_svg(traj: dict, width: int = 900, min_score: float = 0.0) -> str:
    """Timeline: ground truth rows per class, then one band per layer snapshot.

    Filled circles are local points (they define the pseudo segment), hollow
    ones are global points.
    """
    margin, row = 40, 14
    n_snap = traj["n_layers"] + 1
    queries = [(wi, q) for wi, w in enumerate(traj["windows"]) for q in w["queries"]
               if q["score"] >= min_score]
    classes = sorted({a["class_id"] for a in traj["ground_truth"]} | {q["class_id"] for _, q in queries})
    gt_height = row * max(len(classes), 1)
    band = row * max(len(queries), 1)
    height = margin * 2 + gt_height + n_snap * (band + row)
    x = lambda t: margin + float(np.clip(t, 0.0, 1.0)) * (width - 2 * margin)  # noqa: E731

    svg = ET.Element("svg", xmlns="http://www.w3.org/2000/svg", width=str(width),
                     height=str(height), viewBox=f"0 0 {width} {height}")
    ET.SubElement(svg, "title").text = f"query points for clip {traj['clip_id']}"
    ET.SubElement(svg, "rect", x=str(margin), y=str(margin), width=str(width - 2 * margin),
                  height=str(height - 2 * margin), fill="none", stroke="#cccccc")
    row_of = {c: i for i, c in enumerate(classes)}
    for a in traj["ground_truth"]:
        y = margin + row_of[a["class_id"]] * row
        ET.SubElement(svg, "rect", x=f"{x(a['start']):.2f}", y=str(y + 2),
                      width=f"{max(x(a['end']) - x(a['start']), 1.0):.2f}", height=str(row - 4),
                      fill=_PALETTE[a["class_id"] % len(_PALETTE)], opacity="0.6")
    mask = traj["local_mask"]
    for s in range(n_snap):
        top = margin + gt_height + row + s * (band + row)
        label = "init" if s == 0 else f"layer {s}"
        ET.SubElement(svg, "text", x="2", y=str(top + row), **{"font-size": "10"}).text = label
        for i, (_, q) in enumerate(queries):
            y = top + i * row + row / 2
            colour = _PALETTE[q["class_id"] % len(_PALETTE)]
            if s > 0:
                a, b = q["segments"][s - 1]
                ET.SubElement(svg, "line", x1=f"{x(a):.2f}", x2=f"{x(b):.2f}", y1=f"{y:.2f}",
                              y2=f"{y:.2f}", stroke=colour, **{"stroke-width": "2"})
            for j, t in enumerate(q["snapshots"][s]):
                local = mask[j] if j < len(mask) else False
                ET.SubElement(svg, "circle", cx=f"{x(t):.2f}", cy=f"{y:.2f}", r="2.5",
                              stroke=colour, fill=colour if local else "none")
    return ET.tostring(svg, encoding="unicode")
