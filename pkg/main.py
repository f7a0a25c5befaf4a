import sys

from jmstate.cli import main

if __name__ == "__main__":
    sys.exit(main())
