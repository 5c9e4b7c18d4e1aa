"""
Pytest configuration and fixtures.
"""

import sys
from pathlib import Path

# Make the lca_lab package importable without installation
repo_root = Path(__file__).parent.parent
sys.path.insert(0, str(repo_root))

# Import all fixtures
pytest_plugins = ['tests.fixtures.common_fixtures']
