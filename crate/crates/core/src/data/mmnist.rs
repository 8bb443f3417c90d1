//! Multi-MNIST grids with 'by loc' and 'by ref' tasks.
//!
//! Digits are pasted on a grid with an 18 px stride, so neighbouring 28x28
//! digits overlap by 10 px; overlapping pixels take the maximum intensity.
//! Every sample draws from its own generator `rng_for(seed, index)`, which
//! makes generation order-free and the output independent of worker count.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::idx::{Mnist, DIGIT_PIXELS, DIGIT_SIDE};
use super::DataError;
use crate::parallel::map_indices;
use crate::rng::{rng_for, Xoshiro};

pub const CELL_STRIDE: usize = 18;
pub const NUM_CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
}

impl Grid {
    pub const SUPPORTED: [Grid; 3] = [Grid::new(1, 2), Grid::new(2, 2), Grid::new(3, 3)];

    pub const fn new(rows: usize, cols: usize) -> Self {
        Grid { rows, cols }
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn canvas_height(&self) -> usize {
        DIGIT_SIDE + (self.rows - 1) * CELL_STRIDE
    }

    pub fn canvas_width(&self) -> usize {
        DIGIT_SIDE + (self.cols - 1) * CELL_STRIDE
    }

    /// Pixel center of cell `(row, col)`.
    pub fn center(&self, row: usize, col: usize) -> (u16, u16) {
        let half = DIGIT_SIDE / 2;
        ((row * CELL_STRIDE + half) as u16, (col * CELL_STRIDE + half) as u16)
    }

    fn check_supported(&self) -> Result<(), DataError> {
        if Self::SUPPORTED.contains(self) {
            Ok(())
        } else {
            Err(DataError::InvalidArgument(format!(
                "grid {self} not supported (use 1x2, 2x2 or 3x3)"
            )))
        }
    }
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

impl FromStr for Grid {
    type Err = String;

    /// `ROWSxCOLS`, e.g. `3x3`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (r, c) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("grid '{s}' is not of the form ROWSxCOLS"))?;
        let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("grid '{s}': bad number '{v}'"));
        let grid = Grid::new(parse(r)?, parse(c)?);
        if Grid::SUPPORTED.contains(&grid) {
            Ok(grid)
        } else {
            Err(format!("grid '{s}' not supported (use 1x2, 2x2 or 3x3)"))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    ByLoc,
    ByRef,
}

impl Family {
    pub fn code(self) -> u8 {
        match self {
            Family::ByLoc => 0,
            Family::ByRef => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Family::ByLoc),
            1 => Some(Family::ByRef),
            _ => None,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::ByLoc => "by_loc",
            Family::ByRef => "by_ref",
        })
    }
}

impl FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "by_loc" | "by-loc" | "loc" => Ok(Family::ByLoc),
            "by_ref" | "by-ref" | "ref" => Ok(Family::ByRef),
            other => Err(format!("unknown task family '{other}' (expected by_loc or by_ref)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    ByLoc { row: usize, col: usize },
    ByRef { ref_digit: u8 },
}

/// One task of a task family, with its position among the family's tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub index: usize,
    pub count: usize,
}

impl TaskSpec {
    pub fn by_loc(grid: Grid, row: usize, col: usize) -> Result<Self, DataError> {
        if row >= grid.rows || col >= grid.cols {
            return Err(DataError::InvalidArgument(format!(
                "cell ({row},{col}) outside {grid} grid"
            )));
        }
        Ok(TaskSpec {
            kind: TaskKind::ByLoc { row, col },
            index: row * grid.cols + col,
            count: grid.cells(),
        })
    }

    pub fn by_ref(ref_digit: u8) -> Result<Self, DataError> {
        if ref_digit as usize >= NUM_CLASSES {
            return Err(DataError::InvalidArgument(format!("reference digit {ref_digit} outside 0..9")));
        }
        Ok(TaskSpec {
            kind: TaskKind::ByRef { ref_digit },
            index: ref_digit as usize,
            count: NUM_CLASSES,
        })
    }

    /// All tasks of `family` on `grid`, ordered by index.
    pub fn all(family: Family, grid: Grid) -> Vec<TaskSpec> {
        match family {
            Family::ByLoc => (0..grid.rows)
                .flat_map(|r| (0..grid.cols).map(move |c| (r, c)))
                .map(|(r, c)| TaskSpec::by_loc(grid, r, c).expect("in range"))
                .collect(),
            Family::ByRef => (0..NUM_CLASSES as u8)
                .map(|d| TaskSpec::by_ref(d).expect("in range"))
                .collect(),
        }
    }

    /// Comma-free name for CSV columns and file names, e.g. `loc_0_1`, `ref_3`.
    pub fn key(&self) -> String {
        match self.kind {
            TaskKind::ByLoc { row, col } => format!("loc_{row}_{col}"),
            TaskKind::ByRef { ref_digit } => format!("ref_{ref_digit}"),
        }
    }

    pub fn one_hot(&self) -> Vec<f32> {
        let mut v = vec![0.0; self.count];
        v[self.index] = 1.0;
        v
    }
}

impl fmt::Display for TaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            TaskKind::ByLoc { row, col } => write!(f, "loc({row},{col})"),
            TaskKind::ByRef { ref_digit } => write!(f, "right-of-{ref_digit}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RefInfo {
    pub ref_digit: u8,
    pub answer: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    /// Row-major `H x W` canvas.
    pub pixels: Vec<u8>,
    /// Row-major digit class per cell.
    pub cell_labels: Vec<u8>,
    /// `(row, col)` pixel center per cell.
    pub centers: Vec<(u16, u16)>,
    pub reference: Option<RefInfo>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub grid: Grid,
    pub height: usize,
    pub width: usize,
    pub family: Family,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiMnistDataset {
    pub header: Header,
    pub samples: Vec<Sample>,
}

impl MultiMnistDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn tasks(&self) -> Vec<TaskSpec> {
        TaskSpec::all(self.header.family, self.header.grid)
    }

    pub fn task_count(&self) -> usize {
        match self.header.family {
            Family::ByLoc => self.header.grid.cells(),
            Family::ByRef => NUM_CLASSES,
        }
    }

    /// Answer of `task` on sample `i`, or `None` when the sample was not
    /// generated for that task.
    pub fn label(&self, i: usize, task: &TaskSpec) -> Option<u8> {
        let s = &self.samples[i];
        match task.kind {
            TaskKind::ByLoc { .. } => s.cell_labels.get(task.index).copied(),
            TaskKind::ByRef { ref_digit } => s
                .reference
                .filter(|r| r.ref_digit == ref_digit)
                .map(|r| r.answer),
        }
    }

    /// Center of the cell holding the answer of `task` on sample `i`.
    pub fn answer_center(&self, i: usize, task: &TaskSpec) -> Option<(u16, u16)> {
        let s = &self.samples[i];
        match task.kind {
            TaskKind::ByLoc { .. } => s.centers.get(task.index).copied(),
            TaskKind::ByRef { ref_digit } => {
                s.reference.filter(|r| r.ref_digit == ref_digit)?;
                let pos = s.cell_labels.iter().position(|&l| l == ref_digit)?;
                s.centers.get(pos + 1).copied()
            }
        }
    }

    /// Indices of samples that carry a label for `task`.
    pub fn indices_for(&self, task: &TaskSpec) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.label(i, task).is_some()).collect()
    }

    /// First `n` samples (or all if fewer).
    pub fn truncated(&self, n: usize) -> Self {
        MultiMnistDataset {
            header: self.header,
            samples: self.samples.iter().take(n).cloned().collect(),
        }
    }

    /// Samples `[0, n)` and `[n, len)`.
    pub fn split_at(&self, n: usize) -> (Self, Self) {
        let n = n.min(self.len());
        let part = |s: &[Sample]| MultiMnistDataset {
            header: self.header,
            samples: s.to_vec(),
        };
        (part(&self.samples[..n]), part(&self.samples[n..]))
    }
}

fn class_pools(mnist: &Mnist) -> Result<[Vec<usize>; 10], DataError> {
    let pools = mnist.by_class();
    if let Some(d) = pools.iter().position(|p| p.is_empty()) {
        return Err(DataError::EmptySource(d as u8));
    }
    Ok(pools)
}

/// Uniform class, then a uniform image of that class.
fn draw_digit(rng: &mut Xoshiro, pools: &[Vec<usize>; 10], class: Option<u8>) -> (u8, usize) {
    let class = class.unwrap_or_else(|| rng.gen_range(0..NUM_CLASSES as u8));
    let pool = &pools[class as usize];
    (class, pool[rng.gen_range(0..pool.len())])
}

fn compose(mnist: &Mnist, grid: Grid, images: &[usize], labels: Vec<u8>, reference: Option<RefInfo>) -> Sample {
    let (h, w) = (grid.canvas_height(), grid.canvas_width());
    let mut pixels = vec![0u8; h * w];
    let mut centers = Vec::with_capacity(grid.cells());
    for (cell, &img) in images.iter().enumerate() {
        let (r, c) = (cell / grid.cols, cell % grid.cols);
        let (top, left) = (r * CELL_STRIDE, c * CELL_STRIDE);
        let digit = mnist.image(img);
        debug_assert_eq!(digit.len(), DIGIT_PIXELS);
        for y in 0..DIGIT_SIDE {
            let row = &mut pixels[(top + y) * w + left..(top + y) * w + left + DIGIT_SIDE];
            for (p, &d) in row.iter_mut().zip(&digit[y * DIGIT_SIDE..(y + 1) * DIGIT_SIDE]) {
                *p = (*p).max(d);
            }
        }
        centers.push(grid.center(r, c));
    }
    Sample {
        pixels,
        cell_labels: labels,
        centers,
        reference,
    }
}

fn by_loc_sample(mnist: &Mnist, pools: &[Vec<usize>; 10], grid: Grid, seed: u64, index: usize) -> Sample {
    let mut rng = rng_for(seed, index as u64);
    let (labels, images): (Vec<u8>, Vec<usize>) =
        (0..grid.cells()).map(|_| draw_digit(&mut rng, pools, None)).unzip();
    compose(mnist, grid, &images, labels, None)
}

/// Sample `index` is generated for task `index mod 10`, so every reference
/// digit gets the same number of samples.
fn by_ref_sample(mnist: &Mnist, pools: &[Vec<usize>; 10], grid: Grid, seed: u64, index: usize) -> Sample {
    let mut rng = rng_for(seed, index as u64);
    let ref_digit = (index % NUM_CLASSES) as u8;
    let ref_cell = {
        let r = rng.gen_range(0..grid.rows);
        let c = rng.gen_range(0..grid.cols - 1);
        r * grid.cols + c
    };
    let mut labels = Vec::with_capacity(grid.cells());
    let mut images = Vec::with_capacity(grid.cells());
    for cell in 0..grid.cells() {
        let class = if cell == ref_cell {
            ref_digit
        } else {
            // uniform over the nine other digits
            let k = rng.gen_range(0..NUM_CLASSES as u8 - 1);
            if k >= ref_digit {
                k + 1
            } else {
                k
            }
        };
        let (l, img) = draw_digit(&mut rng, pools, Some(class));
        labels.push(l);
        images.push(img);
    }
    let answer = labels[ref_cell + 1];
    compose(mnist, grid, &images, labels, Some(RefInfo { ref_digit, answer }))
}

/// Generate `n` samples of `family` on `grid` using up to `workers` threads.
pub fn generate(
    mnist: &Mnist,
    family: Family,
    grid: Grid,
    n: usize,
    seed: u64,
    workers: usize,
) -> Result<MultiMnistDataset, DataError> {
    grid.check_supported()?;
    if family == Family::ByRef && grid != Grid::new(3, 3) {
        return Err(DataError::InvalidArgument(format!(
            "by_ref datasets use the 3x3 grid, got {grid}"
        )));
    }
    let pools = class_pools(mnist)?;
    let make = match family {
        Family::ByLoc => by_loc_sample,
        Family::ByRef => by_ref_sample,
    };
    let samples = map_indices(n, workers, |i| make(mnist, &pools, grid, seed, i));
    Ok(MultiMnistDataset {
        header: Header {
            grid,
            height: grid.canvas_height(),
            width: grid.canvas_width(),
            family,
            seed,
        },
        samples,
    })
}

pub fn gen_by_loc(mnist: &Mnist, grid: Grid, n: usize, seed: u64) -> Result<MultiMnistDataset, DataError> {
    generate(mnist, Family::ByLoc, grid, n, seed, crate::parallel::worker_count())
}

pub fn gen_by_ref(mnist: &Mnist, grid: Grid, n: usize, seed: u64) -> Result<MultiMnistDataset, DataError> {
    generate(mnist, Family::ByRef, grid, n, seed, crate::parallel::worker_count())
}

/// Ten synthetic digits per class; image `10*c + k` is filled with value
/// `c * 20 + k + 1` so the class is recoverable from any pixel.
#[cfg(test)]
pub(crate) fn toy_mnist() -> Mnist {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for c in 0..10u8 {
        for k in 0..10u8 {
            pixels.extend(std::iter::repeat(c * 20 + k + 1).take(DIGIT_PIXELS));
            labels.push(c);
        }
    }
    Mnist { pixels, labels }
}
