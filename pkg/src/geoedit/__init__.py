"""Geometry-consistent object manipulation at desk scale.

Camera/pose descriptors, mask encodings, silhouette rendering and pose
estimation, synthetic paired-view data, conditioning assembly, and a
multi-task flow-matching trainer with a CLI front end.
"""

from .camera import (
    EulerCamera,
    RelPoseDescriptor,
    RigidTransform,
    build_descriptor,
    build_outofframe_descriptor,
    camera_position,
    look_at_extrinsics,
    project_point,
    relative_transform,
    so3_exp,
    so3_log,
    wrap_angle,
)
from .conditioning import (
    ConditioningTuple,
    Encoders,
    LatentGrid,
    PoseTokenEncoder,
    PoseTokens,
    Task,
    ToyLatentEncoder,
    assemble_conditioning,
    drop_camera_condition,
    encode_descriptor,
    fourier_encode,
)
from .flow import (
    FlowSample,
    NetConfig,
    TrainConfig,
    VelocityNet,
    euler_sample,
    fm_loss,
    make_flow_sample,
    sample_task,
    train,
    velocity_forward,
)
from .masks import (
    BBox,
    BinaryMaskVolume,
    MaskCode,
    estimate_target_mask,
    mask_bbox,
    mask_iou,
    pixel_shuffle_inverse,
    pixel_unshuffle,
)
from .mesh import TriangleMesh, load_obj, make_primitive, save_obj
from .metrics import EvalConfig, PoseError, eval_report, extract_silhouette, object_iou, pose_mape, psnr
from .pose import EstimatorConfig, PoseEstimate, estimate_camera, filter_by_iou, soft_iou_loss
from .render import SilhouetteImage, render_hard, render_soft
from .synth import (
    CameraPerturb,
    CameraRanges,
    GenConfig,
    SamplePair,
    ToyScene,
    build_dataset,
    render_pair,
    sample_source_camera,
    sample_target_camera,
)

__version__ = "0.1.0"
