import pathlib
import sys

# Allow running pytest from a fresh checkout without installing the package.
sys.path.insert(0, str(pathlib.Path(__file__).parent / "src"))
