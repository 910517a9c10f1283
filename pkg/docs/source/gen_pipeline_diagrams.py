"""
Generate the pipeline and model diagrams for the documentation.

This script is called from Sphinx (see conf.py) and writes SVG files
into docs/source/_static/images.
"""

import os
from graphviz import Digraph

# Output directory for images
HERE = os.path.dirname(__file__)
OUT_DIR = os.path.join(HERE, "_static", "images")
os.makedirs(OUT_DIR, exist_ok=True)


def make_pipeline():
    dot = Digraph("Pipeline")
    dot.attr(rankdir="LR")
    dot.attr("node", shape="box")

    # Stages
    dot.node("corpus", "gen-corpus\n(synthbench)")
    dot.node("pre", "pretrain\ndomain only\n(unlabeled)")
    dot.node("post", "posttrain\ndomain + layout\n(labeled)")
    dot.node("det", "baseline detector\n(labeled source)")
    dot.node("gen", "generate\ntarget refs + source layouts")
    dot.node("adapt", "fine-tune copy\nof detector")
    dot.node("eval", "AP on target test")

    dot.edge("corpus", "pre")
    dot.edge("pre", "post", label="init_from")
    dot.edge("corpus", "det")
    dot.edge("post", "gen")
    dot.edge("gen", "adapt")
    dot.edge("det", "adapt", label="copy")
    dot.edge("adapt", "eval")

    dot.render(os.path.join(OUT_DIR, "pipeline"), format="svg", cleanup=True)


def make_conditioning():
    dot = Digraph("Conditioning")
    dot.attr(rankdir="TB")
    dot.attr("node", shape="box")

    dot.node("ref", "reference image")
    dot.node("enc", "StatsDomainEncoder\n(frozen)")
    dot.node("tok", "domain tokens")
    dot.node("lay", "layout raster\n(channel coded)")
    dot.node("lenc", "LayoutEncoder\n(zero-init projections)")
    dot.node("unet", "UNet\ncross-attention + layout add")
    dot.node("eps", "predicted noise")

    dot.edge("ref", "enc")
    dot.edge("enc", "tok")
    dot.edge("tok", "unet", label="keys / values")
    dot.edge("lay", "lenc")
    dot.edge("lenc", "unet", label="encoder / decoder")
    dot.edge("unet", "eps")

    dot.render(os.path.join(OUT_DIR, "conditioning"), format="svg", cleanup=True)


if __name__ == "__main__":
    make_pipeline()
    make_conditioning()
