//! Dataset synthesis and stage chaining shared by the command line and the
//! experiments.

use crate::config::RunConfig;
use crate::data::{make_longtailed, synth_generate, Dataset, Split};
use crate::error::Result;

/// Index ranges inside each synthetic class so the splits never share an
/// image.
const POOL_FIRST: u64 = 0;
const VAL_FIRST: u64 = 1 << 20;
const TEST_FIRST: u64 = 2 << 20;

/// Pretraining set plus the long-tailed target splits.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub pretrain: Dataset,
    pub pool: Dataset,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

pub fn synthesize(cfg: &RunConfig) -> Result<Datasets> {
    let params = cfg.synth();
    let pretrain = synth_generate(&cfg.pretrain_synth(), cfg.pretrain_per_class, cfg.seed, 0, POOL_FIRST, Split::Train)?;
    let pool = synth_generate(&params, cfg.pool_per_class, cfg.seed, cfg.domain, POOL_FIRST, Split::Train)?;
    let train = make_longtailed(&pool, cfg.n_max, cfg.imbalance, cfg.seed)?;
    let val = synth_generate(&params, cfg.val_per_class, cfg.seed, cfg.domain, VAL_FIRST, Split::Val)?;
    let test = synth_generate(&params, cfg.test_per_class, cfg.seed, cfg.domain, TEST_FIRST, Split::Test)?;
    Ok(Datasets {
        pretrain,
        pool,
        train,
        val,
        test,
    })
}
