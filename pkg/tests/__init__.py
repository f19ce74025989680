import sys
from pathlib import Path

# src/ on the path for `python -m unittest discover`, which does not load conftest.py
sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))
