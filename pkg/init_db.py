import logging
import sys

from utils.db import init_db
from utils.errors import ConfigError

logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
logger = logging.getLogger("ttreft.init_db")

# Create the results-ledger tables at DATABASE_URL (or the URL given as the first argument)
if __name__ == "__main__":
    try:
        engine = init_db(sys.argv[1] if len(sys.argv) > 1 else None)
        logger.info("Results ledger initialized at %s", engine.url)
    except ConfigError as e:
        logger.error("%s", e)
        sys.exit(e.exit_code)
