import sys

from odesens.cli import main

sys.exit(main())
