__version__ = "0.1.0"

from . import core
from . import sensor
from . import gcms
from . import nn
from . import metrics
from . import experiment
from . import analysis

import logging
logging.basicConfig(format='[nosekit:%(filename)s:L%(lineno)d] %(levelname)-6s %(message)s')
logging.getLogger().setLevel(logging.INFO)
