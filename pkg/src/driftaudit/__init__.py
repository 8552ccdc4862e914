"""Batch audit of content drift in recommendation chains.

Collect (or ingest) seed-to-recommendation chains, pick perceptual
keyframes, attach unit-norm embeddings, and quantify how far
recommended content drifts from its seeds with a suite of divergence
metrics, 2-D projections, and reproducible reports.
"""

from .analysis import (
    AnalysisConfig,
    ClusterStats,
    Codebook,
    CrossDomainBlock,
    DivergenceReport,
    DomainModalityCell,
    analyze_single_domain,
    centroid_variance,
    cluster_stats,
    codeword_histogram,
    compare_domains,
    cross_domain_normalize,
    delta_metrics,
    diameter,
    fit_codebook,
    jsd,
    jsd_from_histograms,
    mean_intra_distance,
    report_to_dict,
    report_to_json,
    report_to_text,
    scale_wasserstein,
    sliced_wasserstein,
)
from .chains import (
    AuditDataset,
    RecommendationChain,
    VideoRecord,
    dataset_stats,
    parse_dataset,
    serialize_dataset,
)
from .collect import (
    RecommendationProvider,
    StepFailed,
    SyntheticGraphParams,
    SyntheticProvider,
    VideoDescriptor,
    WalkConfig,
    build_synthetic_provider,
    collect_dataset,
    walk_chain,
)
from .embeddings import (
    MODALITIES,
    MODALITY_CAPTION,
    MODALITY_IMAGE,
    CaptionRecord,
    EmbeddingKey,
    EmbeddingSet,
    EmbedServiceClient,
    KeyframeImage,
    PointCloud,
    PointLabel,
    fetch_embeddings,
    group_points,
    load_embeddings,
    mean_pool_per_video,
    merge_embeddings,
    save_embeddings,
)
from .errors import DriftAuditError
from .keyframes import (
    FrameSequence,
    KeyframeConfig,
    KeyframeSet,
    SalienceSeries,
    compression_ratio,
    extract_keyframes,
    frame_salience,
    load_frame_dir,
    select_keyframes,
)
from .pipeline import (
    ConfigError,
    DatasetSpec,
    EmbeddingSourceSpec,
    PipelineConfig,
    PipelineResult,
    ProjectionSpec,
    SyntheticCollectSpec,
    load_config,
    run_pipeline,
    validate_config,
)
from .projection import (
    HullPolygon,
    Projection2D,
    convex_hull,
    emit_plot_data,
    hull_contains,
    import_coords,
    pca_project,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
