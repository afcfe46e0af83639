//! Hyper-representations: an attention autoencoder over flattened model
//! checkpoints. Tokenized weight and log-alpha grids go in, a fixed-width
//! embedding per checkpoint comes out, trained with a contrastive term on
//! augmented views plus variance-weighted reconstruction, and read out by
//! linear probes that predict accuracy, sparsity, epoch, and the
//! generalization gap.

pub mod ae;
pub mod losses;
pub mod probe;
pub mod tokens;
pub mod train;

pub use ae::{load_ae, save_ae, AeDims, AeParams};
pub use probe::{probe, probe_all, shuffled_probe_r2, ProbeReport, PROBE_TARGETS};
pub use tokens::{token_layout, tokenize, LayerStats, TokenLayout};
pub use train::{
    embed_dataset, load_ae_dataset, run_hyperrep, split_by_model, train_ae, AeDataset,
    AeTrainConfig, Embedding, HyperrepConfig, HyperrepSummary,
};
