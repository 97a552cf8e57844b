from .svm import Standardizer, SvmModel, standardize_fit, svm_predict, svm_train
from .nets import (ConvBlock, NetConfig, NetParams, TrainConfig, grad_check, net_backward,
                   net_forward, net_init, net_predict, net_train)
