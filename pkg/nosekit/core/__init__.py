from .errors import *
from .storage import *
from .reader import *
from .types import *
from .registry import *
from .base_dataset import *
