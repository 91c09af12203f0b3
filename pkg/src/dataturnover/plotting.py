"""SVG figures: Love plots of covariate balance and selective-interval plots.

Figures are drawn with matplotlib's SVG writer and then annotated so the
plotted numbers can be read back from the file (``data-*`` attributes on
each marker group). Output is byte-stable for identical input.
"""

from __future__ import annotations

import io
import os
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from dataturnover.inference import EffectInterval  # noqa: E402
from dataturnover.matching import BalanceTable  # noqa: E402

SVG_NS = "http://www.w3.org/2000/svg"
XLINK_NS = "http://www.w3.org/1999/xlink"
ET.register_namespace("", SVG_NS)
ET.register_namespace("xlink", XLINK_NS)
ET.register_namespace("dc", "http://purl.org/dc/elements/1.1/")
ET.register_namespace("cc", "http://creativecommons.org/ns#")
ET.register_namespace("rdf", "http://www.w3.org/1999/02/22-rdf-syntax-ns#")

_RC = {"svg.hashsalt": "dataturnover", "svg.fonttype": "none"}


class PlotError(ValueError):
    pass


@dataclass(frozen=True)
class LovePlotSpec:
    table: BalanceTable
    path: str | os.PathLike
    pre_marker: str = "o"
    post_marker: str = "D"
    reference: float = 0.1
    title: str | None = None


def _annotate(svg: bytes, attributes: dict[str, dict[str, str]]) -> bytes:
    root = ET.fromstring(svg)
    for el in root.iter():
        extra = attributes.get(el.get("id", ""))
        if extra:
            el.attrib.update(extra)
    return ET.tostring(root, encoding="utf-8", xml_declaration=True)


def _save(fig, path, attributes) -> None:
    buf = io.BytesIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    with open(path, "wb") as fh:
        fh.write(_annotate(buf.getvalue(), attributes))


def render_love_plot(spec: LovePlotSpec) -> str:
    """Dot plot with one row per balance-table row, top to bottom in table order."""
    rows = spec.table.rows
    if not rows:
        raise PlotError("balance table is empty")
    n = len(rows)
    attrs: dict[str, dict[str, str]] = {}
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6.5, 1.2 + 0.28 * n))
        for i, r in enumerate(rows):
            y = n - 1 - i
            pre = ax.scatter([r.pre_match_diff], [y], marker=spec.pre_marker, facecolors="none",
                             edgecolors="tab:red", zorder=3, clip_on=False)
            post = ax.scatter([r.post_match_diff], [y], marker=spec.post_marker, color="tab:blue", zorder=4,
                              clip_on=False)
            pre.set_gid(f"love-pre-{i}")
            post.set_gid(f"love-post-{i}")
            common = {"data-row": str(i), "data-covariate": r.name, "data-metric": r.metric}
            attrs[f"love-pre-{i}"] = {**common, "data-stage": "pre", "data-value": repr(r.pre_match_diff)}
            attrs[f"love-post-{i}"] = {**common, "data-stage": "post", "data-value": repr(r.post_match_diff)}
        ref = ax.axvline(spec.reference, color="grey", linestyle="--", linewidth=1)
        ref.set_gid("love-reference")
        attrs["love-reference"] = {"data-value": repr(spec.reference)}
        ax.set_yticks(range(n))
        ax.set_yticklabels([r.name for r in reversed(rows)])
        ax.set_ylim(-0.7, n - 0.3)
        ax.set_xlim(left=0)
        ax.set_xlabel("absolute (standardized) mean difference")
        ax.scatter([], [], marker=spec.pre_marker, facecolors="none", edgecolors="tab:red", label="before matching")
        ax.scatter([], [], marker=spec.post_marker, color="tab:blue", label="after matching")
        ax.legend(loc="lower right", fontsize="small")
        ax.set_title(spec.title or f"Covariate balance {spec.table.subgroup}".strip())
        fig.tight_layout()
        _save(fig, spec.path, attrs)
    return os.fspath(spec.path)


def read_love_plot(path: str | os.PathLike) -> list[dict[str, str]]:
    """Embedded marker values in row order; each dict has covariate, pre, post, metric."""
    root = ET.parse(path).getroot()
    found: dict[int, dict[str, str]] = {}
    for el in root.iter():
        if "data-row" in el.attrib and "data-stage" in el.attrib:
            row = found.setdefault(int(el.get("data-row")), {"covariate": el.get("data-covariate"),
                                                             "metric": el.get("data-metric")})
            row[el.get("data-stage")] = el.get("data-value")
    return [found[i] for i in sorted(found)]


def render_intervals(intervals: Sequence[EffectInterval], path: str | os.PathLike, title: str = "") -> str:
    """Horizontal interval plot of selective confidence intervals."""
    if not intervals:
        raise PlotError("no intervals to plot")
    n = len(intervals)
    attrs = {}
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6.5, 1.2 + 0.4 * n))
        for i, iv in enumerate(intervals):
            y = n - 1 - i
            lo = iv.lower if iv.lower != float("-inf") else iv.estimate - 1.0
            hi = iv.upper if iv.upper != float("inf") else iv.estimate + 1.0
            line = ax.plot([lo, hi], [y, y], color="tab:blue")[0]
            ax.plot([iv.estimate], [y], "o", color="tab:blue")
            line.set_gid(f"interval-{i}")
            attrs[f"interval-{i}"] = {
                "data-outcome": iv.outcome, "data-subgroup": iv.subgroup, "data-level": repr(iv.level),
                "data-lower": repr(iv.lower), "data-upper": repr(iv.upper), "data-estimate": repr(iv.estimate),
            }
        ax.axvline(0.0, color="grey", linestyle="--", linewidth=1)
        ax.set_yticks(range(n))
        ax.set_yticklabels([f"{iv.outcome} ({iv.subgroup}, {iv.level:.4g})" for iv in reversed(intervals)])
        ax.set_xlabel("additive treatment effect")
        ax.set_title(title or "Selective confidence intervals")
        fig.tight_layout()
        _save(fig, path, attrs)
    return os.fspath(path)
