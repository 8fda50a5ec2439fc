import sys

from facecloak.harness.cli import main

sys.exit(main())
