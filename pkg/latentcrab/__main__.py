import sys

from latentcrab.cli import main

sys.exit(main())
