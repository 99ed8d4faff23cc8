import sys

from src.semantic_mapper.cli import main


if __name__ == "__main__":
    sys.exit(main())
