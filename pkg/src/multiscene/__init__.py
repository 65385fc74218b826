"""Multi-label scene classification built from single-label datasets.

Training happens in two phases: a cyclical trainer visits one task's
dataset at a time, distilling each pass into an EMA teacher, and an
active-learning loop then adapts the consolidated model to jointly
distributed multi-label data with oracle-annotated samples.
"""

from .accumulation import (CycleTrainingConfig, ema_consolidate, run_accumulation,
                           stability_coefficient)
from .adaptation import (AdaptationConfig, Pools, pools_from_bundle, run_adaptation,
                         select_batch)
from .estimators import ConsistencyActiveLearner, CyclicDistillationClassifier
from .network import EncoderConfig, ModelBundle, init_params, predict_all
from .synthetic import (DatasetBundle, GeneratorConfig, GroundTruthOracle,
                        generate_bundle, load_bundle, oracle_from_bundle_dir,
                        render_scene, save_bundle)
from .tensor import Tensor, no_grad, use_dtype

__version__ = "0.1.0"

__all__ = [
    "AdaptationConfig", "ConsistencyActiveLearner", "CycleTrainingConfig",
    "CyclicDistillationClassifier", "DatasetBundle", "EncoderConfig",
    "GeneratorConfig", "GroundTruthOracle", "ModelBundle", "Pools", "Tensor",
    "ema_consolidate", "generate_bundle", "init_params", "load_bundle", "no_grad",
    "oracle_from_bundle_dir", "pools_from_bundle", "predict_all",
    "render_scene", "run_accumulation",
    "run_adaptation", "save_bundle", "select_batch", "stability_coefficient",
    "use_dtype", "__version__",
]
