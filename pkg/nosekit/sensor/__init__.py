from .dataset import *
from .preprocessing import *
from .synthetic import *
from .constructing import *
