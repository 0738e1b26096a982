"""lsqtomo entry point: allows `python -m lsqtomo`."""

import asyncio
import sys

from lsqtomo.main import main

sys.exit(asyncio.run(main()))
