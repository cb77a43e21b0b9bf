"""First-order bilevel optimization through a penalized minimax reformulation.

The solver (:mod:`scalebio.minimax`) updates the inner model, an auxiliary
inner copy and the outer weights with block-coordinate stochastic gradient
steps only.  :mod:`scalebio.reweight` supplies data-reweighting problems,
:mod:`scalebio.oracle` closed-form ground truth on quadratics and
:mod:`scalebio.baselines` second-order hypergradient estimators.
"""

from .problems import (
    BatchHandle,
    BilevelProblem,
    DataSource,
    ProblemConstants,
    QuadraticInstance,
    SamplerConfig,
    SourceSpec,
    SyntheticDataset,
    gen_sources,
    make_quadratic,
    read_dataset_csv,
    sample_batch,
    write_dataset_csv,
)
from .models import InnerModel
from .reweight import HyperCleanProblem, MixtureWeights, SourceReweightProblem, sigmoid, softmax
from .records import RunRecord
from .minimax import (
    BlockPartition,
    NonFiniteGradientError,
    Schedule,
    ScaleBiOState,
    make_partition,
    run,
    scalebio_step,
)
from .oracle import QuadraticOracle, finite_diff_grad, ift_hypergrad

__version__ = "0.1.0"
