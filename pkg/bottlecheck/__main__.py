"""Allow running bottlecheck as a module: python -m bottlecheck."""

from bottlecheck.main import main

if __name__ == "__main__":
    main()
