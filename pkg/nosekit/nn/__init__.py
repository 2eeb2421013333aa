from .autograd import *
from .layers import *
from .models import *
from .losses import *
from .optim import *
from .training import *
