//! Losses, batch samplers, hard-mining statistics and the training loop.

mod losses;
mod mining;
mod sampler;
mod trainer;

pub use losses::{
    batch_hard_triplet_loss, combined_loss, identity_loss, mine_batch_hard, pairwise_distances,
};
pub use mining::{mining_statistics, AnchorMining, MiningRecord, MiningStats};
pub use sampler::{domain_aware_batches, random_batches, BatchSampler, BatchSpec};
pub use trainer::{
    read_mining_log, read_train_log, train, BatchMining, EpochLog, OptimizerKind, TrainConfig,
    TrainOutcome, TrainingSet, FINAL_CHECKPOINT, MINING_LOG, TRAIN_LOG,
};
