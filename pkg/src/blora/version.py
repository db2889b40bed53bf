import importlib.metadata
from pathlib import Path

def get_version() -> str:
    """Get the package version from package metadata, or pyproject.toml in a source checkout"""
    try:
        return importlib.metadata.version("bLoRA")
    except importlib.metadata.PackageNotFoundError:
        pyproject_path = Path(__file__).parents[2] / "pyproject.toml"
        if not pyproject_path.exists():
            return "0.0.0"
        try:
            import tomli
            with open(pyproject_path, "rb") as f:
                return tomli.load(f).get("project", {}).get("version", "0.0.0")
        except ImportError:
            with open(pyproject_path, "r") as f:
                for line in f:
                    if line.strip().startswith("version = "):
                        return line.split("=")[1].strip().strip('"\'')
        except Exception:
            pass
        return "0.0.0"
