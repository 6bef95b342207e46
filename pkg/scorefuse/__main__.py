"""Entry point for python -m scorefuse."""

from scorefuse.cli import main

if __name__ == "__main__":
    main()
