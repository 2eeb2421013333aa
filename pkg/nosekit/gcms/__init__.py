from .spectrum import *
from .formula import *
from .embedding import *
