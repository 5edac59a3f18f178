"""Small-vehicle detection in aerial imagery: a numpy residual detector, its
training loop, evaluation, anchors and feature visualization."""

from .dataio import (
    DatasetManifest,
    LetterboxTransform,
    SynthConfig,
    letterbox,
    load_manifest,
    load_pgm,
    load_ppm,
    parse_annotations,
    save_annotations,
    save_pgm,
    save_ppm,
    synth_scene,
)
from .detection import AnchorSet, Detection, decode, kmeans_anchors, nms
from .evaluation import GroundTruthBox, average_precision, evaluate, iou, mean_ap
from .network import (
    Network,
    NetworkSpec,
    build_network,
    conv_res_forward,
    count_params,
    forward,
    init_weights,
    load_weights,
    save_weights,
)
from .rfav import QuantizedStack, quantize_maps, rfav
from .tensor import (
    BatchNormParams,
    ConvParams,
    add_elementwise,
    batchnorm_forward,
    conv2d_backward,
    conv2d_forward,
    leaky_relu,
)
from .training import TrainConfig, assign_targets, detection_loss, gradient_check, lr_schedule, sgd_step, train_loop

__version__ = "0.1.0"
