use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::Resolution;
use crate::seed::{derive_seed, tag};

/// Which views of each entry enter training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mix {
    /// Every entry as both HR and VLR, interleaved 1:1.
    #[default]
    HrAndVlr,
    HrOnly,
    VlrOnly,
}

/// One view of a dataset entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct View {
    pub index: usize,
    pub resolution: Resolution,
}

/// Batches for one epoch over `n` entries. HR and VLR views are shuffled
/// independently and alternated HR, VLR, HR, ... so every batch holds both
/// resolutions. The last partial batch is kept. Depends only on
/// `(seed, epoch)`.
pub fn epoch_batches(n: usize, batch_size: usize, mix: Mix, seed: u64, epoch: u64) -> Result<Vec<Vec<View>>> {
    if n == 0 {
        return Err(Error::InvalidArgument("cannot batch an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[tag::SHUFFLE, epoch]));
    let mut hr: Vec<usize> = (0..n).collect();
    let mut vlr: Vec<usize> = (0..n).collect();
    hr.shuffle(&mut rng);
    vlr.shuffle(&mut rng);
    let hr = hr.into_iter().map(|index| View {
        index,
        resolution: Resolution::Hr,
    });
    let vlr = vlr.into_iter().map(|index| View {
        index,
        resolution: Resolution::Vlr,
    });
    let views: Vec<View> = match mix {
        Mix::HrAndVlr => hr.zip(vlr).flat_map(|(a, b)| [a, b]).collect(),
        Mix::HrOnly => hr.collect(),
        Mix::VlrOnly => vlr.collect(),
    };
    Ok(views.chunks(batch_size).map(<[View]>::to_vec).collect())
}
