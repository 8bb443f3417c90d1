//! Batch assembly: u8 canvases to normalised float tensors for one task.

use super::mmnist::{MultiMnistDataset, TaskSpec};
use super::target::{gaussian_target, DEFAULT_SIGMA};
use super::DataError;
use crate::tensor::Tensor;

/// Spatial alignment required by two pool-2 stages.
pub const ALIGN: usize = 4;

/// Canvas dims rounded up to a multiple of [`ALIGN`]. Padding is zero and
/// goes to the bottom and right, so pixel coordinates are unchanged.
pub fn padded_dims(h: usize, w: usize) -> (usize, usize) {
    (h.div_ceil(ALIGN) * ALIGN, w.div_ceil(ALIGN) * ALIGN)
}

#[derive(Debug, Clone)]
pub struct Batch {
    /// `(N, 1, H, W)` with pixels scaled to `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// `(row, col)` center of the cell holding each answer.
    pub centers: Vec<(usize, usize)>,
    /// `(N, 1, H, W)` Gaussian localisation targets, when requested.
    pub targets: Option<Tensor>,
    pub task: TaskSpec,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Assemble samples `indices` of `ds` for `task`. Every sample must carry
    /// a label for the task.
    pub fn assemble(
        ds: &MultiMnistDataset,
        indices: &[usize],
        task: &TaskSpec,
        with_targets: bool,
    ) -> Result<Batch, DataError> {
        if task.count != ds.task_count() {
            return Err(DataError::InvalidArgument(format!(
                "task {task} belongs to a {}-task family but the dataset has {} tasks",
                task.count,
                ds.task_count()
            )));
        }
        let (h, w) = (ds.header.height, ds.header.width);
        let (ph, pw) = padded_dims(h, w);
        let n = indices.len();
        let mut images = vec![0.0f32; n * ph * pw];
        let mut targets = with_targets.then(|| Vec::with_capacity(n * ph * pw));
        let mut labels = Vec::with_capacity(n);
        let mut centers = Vec::with_capacity(n);
        for (b, &i) in indices.iter().enumerate() {
            let sample = ds.samples.get(i).ok_or_else(|| {
                DataError::InvalidArgument(format!("sample {i} out of range ({} samples)", ds.len()))
            })?;
            let label = ds.label(i, task).ok_or_else(|| {
                DataError::InvalidArgument(format!("sample {i} has no label for task {task}"))
            })?;
            let (cr, cc) = ds.answer_center(i, task).expect("labelled sample has a center");
            let dst = &mut images[b * ph * pw..(b + 1) * ph * pw];
            for y in 0..h {
                for (d, &p) in dst[y * pw..y * pw + w].iter_mut().zip(&sample.pixels[y * w..(y + 1) * w]) {
                    *d = p as f32 / 255.0;
                }
            }
            if let Some(t) = targets.as_mut() {
                t.extend(gaussian_target((cr as usize, cc as usize), ph, pw, DEFAULT_SIGMA)?);
            }
            labels.push(label as usize);
            centers.push((cr as usize, cc as usize));
        }
        let shape = vec![n, 1, ph, pw];
        Ok(Batch {
            images: Tensor::new(shape.clone(), images).expect("sized"),
            labels,
            centers,
            targets: targets.map(|t| Tensor::new(shape, t).expect("sized")),
            task: *task,
        })
    }
}
