# Configuration file for the Sphinx documentation builder.
import os
import subprocess
import sys

# Repo root (folder that contains `doda/` and `pyproject.toml`)
sys.path.insert(0, os.path.abspath('../..'))


# -- Project information

project = 'Dual-Conditioned Diffusion for Detection Data'
copyright = '2026, doda-desk developers'
author = 'doda-desk developers'

release = '0.1'
version = '0.1.0'

# -- General configuration

extensions = [
    'sphinx.ext.duration',
    'sphinx.ext.doctest',
    'sphinx.ext.autodoc',
    'sphinx.ext.napoleon',
    'sphinx.ext.autosummary',
    'sphinx.ext.intersphinx',
    'sphinx.ext.graphviz',
    'sphinx.ext.mathjax',
]
autosummary_generate = True

# Show type hints nicely in the parameter docs
autodoc_typehints = "description"


def generate_pipeline_diagrams(app):
    """Run the diagram generator so SVGs exist before pages are built."""
    here = os.path.dirname(__file__)
    script = os.path.join(here, "gen_pipeline_diagrams.py")
    # Use the same Python that runs Sphinx
    subprocess.run([sys.executable, script], check=True)


def setup(app):
    app.connect("builder-inited", generate_pipeline_diagrams)


intersphinx_mapping = {
    'python': ('https://docs.python.org/3/', None),
    'numpy': ('https://numpy.org/doc/stable/', None),
    'pandas': ('https://pandas.pydata.org/docs/', None),
}
intersphinx_disabled_domains = ['std']

add_module_names = False

graphviz_output_format = "svg"

templates_path = ['_templates']

# -- Options for HTML output

html_theme = 'sphinx_rtd_theme'

# -- Options for EPUB output
epub_show_urls = 'footnote'
