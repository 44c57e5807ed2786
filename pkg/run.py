import os
import sys

# Add the current directory to the Python path
sys.path.insert(0, os.path.abspath("."))

from hscrf.main import main  # noqa: E402

if __name__ == "__main__":
    sys.exit(main())
