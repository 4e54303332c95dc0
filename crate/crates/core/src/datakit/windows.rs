use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Split};
use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use crate::seqcomp::SeriesWindow;

/// Sliding-window enumeration over one split.
///
/// Look-back rows of validation and test windows may reach back into the
/// preceding split; forecast targets always stay inside the split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSampler {
    pub t_in: usize,
    pub t_out: usize,
    pub stride: usize,
    pub split: Split,
}

/// Resolved window positions for one dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowIndex {
    /// First row of the first look-back.
    pub first_row: usize,
    pub count: usize,
    pub sampler: WindowSampler,
}

impl WindowSampler {
    pub fn new(t_in: usize, t_out: usize, stride: usize, split: Split) -> Self {
        Self { t_in, t_out, stride, split }
    }

    pub fn index(&self, ds: &Dataset) -> Result<WindowIndex> {
        if self.t_in == 0 || self.t_out == 0 || self.stride == 0 {
            return Err(Error::Config("t_in, t_out and stride must be positive".into()));
        }
        let range = ds.split_range(self.split);
        let first_row = if self.split == Split::Train {
            range.start
        } else {
            range.start.saturating_sub(self.t_in)
        };
        let usable = range.end - first_row;
        if usable < self.t_in + self.t_out {
            return Err(Error::Config(format!(
                "{:?} split has {usable} usable rows, fewer than t_in + t_out = {}",
                self.split,
                self.t_in + self.t_out
            )));
        }
        Ok(WindowIndex {
            first_row,
            count: (usable - self.t_in - self.t_out) / self.stride + 1,
            sampler: *self,
        })
    }

    /// All windows of the split in order.
    pub fn windows<'a>(&self, ds: &'a Dataset) -> Result<impl Iterator<Item = SeriesWindow> + 'a> {
        let idx = self.index(ds)?;
        Ok((0..idx.count).map(move |i| idx.window(ds, i)))
    }
}

impl WindowIndex {
    /// Row at which window `i`'s look-back starts.
    pub fn start_row(&self, i: usize) -> usize {
        self.first_row + i * self.sampler.stride
    }

    pub fn window(&self, ds: &Dataset, i: usize) -> SeriesWindow {
        assert!(i < self.count, "window {i} out of {}", self.count);
        let s = self.start_row(i);
        let (t_in, t_out) = (self.sampler.t_in, self.sampler.t_out);
        let n = ds.n_channels();
        let x = Tensor::from_fn(t_in, n, |t, c| ds.values[(s + t, c)]);
        let y = Tensor::from_fn(t_out, n, |t, c| ds.values[(s + t_in + t, c)]);
        SeriesWindow {
            x,
            y,
            channel_names: ds.channel_names.clone(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}
