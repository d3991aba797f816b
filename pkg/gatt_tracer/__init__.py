import logging

# library default: stay quiet unless the CLI configures logging
logging.getLogger(__name__).addHandler(logging.NullHandler())
