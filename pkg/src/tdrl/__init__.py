from ._conditions import (  # noqa: F401
    ConditionReport,
    DensityModel,
    check_conditions,
    closed_form_density,
    conditional_independence_score,
    density_from_dataset,
    gaussian_counterexample,
    linear_independence_verdict,
    nonstationary_condition_rows,
    stationary_condition_rows,
)
from ._config import (  # noqa: F401
    CheckConfig,
    EvalConfig,
    RunConfig,
    load_config,
    parse_config,
)
from ._data import ObservedDataset, generate_dataset, split_indices  # noqa: F401
from ._errors import (  # noqa: F401
    ArtifactError,
    ConfigError,
    DataError,
    DomainError,
    NumericalError,
    ParameterError,
    SpecError,
    TDRLError,
)
from ._evaluate import (  # noqa: F401
    MCCReport,
    SkeletonReport,
    brute_force_mcc,
    compare_skeleton,
    correlation_matrix,
    hier_prox,
    lambda_start,
    mcc,
    plot_latent_scatter,
    recover_skeleton,
)
from ._io import (  # noqa: F401
    DatasetManifest,
    RunManifest,
    checksum,
    collect_summaries,
    content_hash,
    decode_array,
    encode_array,
    read_arrays,
    read_checkpoint,
    read_dataset,
    read_manifest,
    read_summary,
    scan_files,
    write_arrays,
    write_checkpoint,
    write_dataset,
    write_history_csv,
    write_manifest,
    write_matrix_csv,
    write_report_csv,
    write_summary,
)
from ._mixing import (  # noqa: F401
    MixingFunction,
    apply_mixing,
    invert_mixing,
    make_random_mixing,
)
from ._model import (  # noqa: F401
    ChangeFactors,
    ModelConfig,
    PosteriorStats,
    PriorOutput,
    TDRLModel,
    reparameterized_sample,
    standard_normal_log_pdf,
)
from ._sim import (  # noqa: F401
    FAMILIES,
    GeneratorSpec,
    LatentTrajectory,
    TransitionNet,
    parent_coupling,
    sample_generalized_normal,
    simulate,
    simulate_changing_dynamics,
    simulate_fixed_heteronoise,
    simulate_gaussian_additive,
    simulate_iid,
    simulate_linear_nongaussian,
    simulate_modular,
)
from ._train import (  # noqa: F401
    PROGRESS_HEADER,
    BetaTrial,
    Checkpoint,
    EpochRecord,
    TrainConfig,
    TrainHistory,
    elbo_step,
    evaluate_elbo,
    mc_kld,
    select_beta,
    train,
)
from ._version import __version__  # noqa: F401
