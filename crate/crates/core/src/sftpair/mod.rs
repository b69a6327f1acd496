//! Population-mean tutor training and preference-pair construction.

mod pairs;
mod train;

pub use pairs::{
    build_pairs, gen_population_mean, pair_seed, read_pairs, sample_population_mean, style_spread,
    write_pairs, PairExample, PairsConfig, PopulationSample, StyleSpread,
};
pub use train::{sft_examples, sft_objective, train_sft, EpochStats, SftConfig, SftExample, SftRun};
