"""Generate data, train every model and emit all plot-data files into one directory."""
import sys

from pbpk_sciml import cli

sys.exit(cli.main(["reproduce-figures", "--train", *sys.argv[1:]]))
