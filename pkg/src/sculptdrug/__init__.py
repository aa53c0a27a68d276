"""Pocket- and surface-conditioned 3D ligand generation via Bayesian flow
networks, with the structural-plausibility metric suite and a small
self-contained training stack (custom reverse-mode tape, Adam, EMA).
"""

from .bfn import (
    BfnState,
    LossBreakdown,
    NoiseSchedule,
    coordinate_loss,
    discrete_time_loss,
    flow_sample_continuous,
    flow_sample_discrete,
    sample_ligand,
    schedule_continuous,
    schedule_discrete,
    type_loss,
)
from .encoder import EncoderConfig, ScaOutput, sca_forward
from .errors import (
    CheckpointError,
    DimensionError,
    GradientError,
    NondeterministicLossError,
    ParseError,
    SculptDrugError,
    ValidationError,
)
from .geometry import (
    LocalEdgeSet,
    RbfConfig,
    UnifiedGraph,
    VirtualAtomSet,
    approximate_ses,
    build_local_edges,
    build_unified_graph,
    count_clashes,
    kmeans_pp,
    knn_edges,
    rbf_expand,
    select_pocket_residues,
    surface_features,
)
from .io import (
    Atom3D,
    AtomVocabulary,
    Checkpoint,
    Ligand,
    LoadedComplex,
    ProteinPocket,
    SurfaceGraph,
    SurfaceVertex,
    load_checkpoint,
    load_complex,
    load_ligand,
    load_pocket,
    load_surface,
    save_checkpoint,
    write_ligand,
    write_pocket,
    write_surface,
)
from .metrics import (
    AffinitySummary,
    EnergyTable,
    Histogram,
    affinity_aggregate,
    bond_length_profile,
    distance_histograms,
    jsd,
)
from .numerics import (
    FdReport,
    MlpSpec,
    OptimizerConfig,
    ParameterStore,
    Tensor,
    adam_step,
    backward,
    ema_update,
    finite_diff_check,
    mlp_forward,
    reverse_gradients,
    softmax_stable,
)

__version__ = "0.1.0"
