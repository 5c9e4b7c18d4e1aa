"""
lca-lab: Locally Competitive Algorithm simulator and analysis toolkit.
"""

__version__ = '1.0.0'
