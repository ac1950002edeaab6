//! Sudoku puzzles: backtracking solver, 4x4 generator, symmetry
//! augmentation, token encoding and the puzzle/solution CSV format.

use std::collections::HashSet;
use std::fs::File;
use std::io::{self, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("row {row}: {msg}")]
    Malformed { row: usize, msg: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("{0}")]
    Invalid(String),
}

/// Box geometry; the grid side is `box_rows * box_cols`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BoxShape {
    pub box_rows: usize,
    pub box_cols: usize,
}

impl BoxShape {
    pub const MICRO: BoxShape = BoxShape { box_rows: 2, box_cols: 2 };
    pub const CLASSIC: BoxShape = BoxShape { box_rows: 3, box_cols: 3 };

    pub fn side(self) -> usize {
        self.box_rows * self.box_cols
    }

    pub fn cells(self) -> usize {
        self.side() * self.side()
    }

    /// Token alphabet: blank, digits `1..=n`, and a reserved pad id.
    pub fn vocab(self) -> usize {
        self.side() + 2
    }

    pub fn pad_token(self) -> usize {
        self.side() + 1
    }

    fn box_of(self, r: usize, c: usize) -> usize {
        (r / self.box_rows) * self.box_rows + c / self.box_cols
    }

    /// Shape for a grid with `cells` cells, if it is one we support.
    pub fn from_cells(cells: usize) -> Option<Self> {
        match cells {
            16 => Some(Self::MICRO),
            81 => Some(Self::CLASSIC),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Puzzle {
    pub shape: BoxShape,
    /// 0 for blank, otherwise a digit in `1..=n`.
    pub grid: Vec<u8>,
    pub solution: Vec<u8>,
}

impl Puzzle {
    pub fn givens_mask(&self) -> Vec<bool> {
        self.grid.iter().map(|&v| v != 0).collect()
    }

    pub fn givens(&self) -> usize {
        self.grid.iter().filter(|&&v| v != 0).count()
    }

    /// Solution satisfies every constraint and agrees with every given.
    pub fn is_consistent(&self) -> bool {
        is_valid_solution(self.shape, &self.solution)
            && self.grid.len() == self.solution.len()
            && self.grid.iter().zip(&self.solution).all(|(&g, &s)| g == 0 || g == s)
    }

    pub fn grid_string(&self) -> String {
        cells_to_string(&self.grid)
    }

    pub fn solution_string(&self) -> String {
        cells_to_string(&self.solution)
    }
}

fn cells_to_string(cells: &[u8]) -> String {
    cells
        .iter()
        .map(|&v| if v == 0 { '.' } else { char::from_digit(v as u32, 10).unwrap_or('?') })
        .collect()
}

/// Complete grid with no repeated digit in any row, column or box.
pub fn is_valid_solution(shape: BoxShape, cells: &[u8]) -> bool {
    let n = shape.side();
    if cells.len() != shape.cells() || cells.iter().any(|&v| v == 0 || v as usize > n) {
        return false;
    }
    let mut seen = vec![0u32; 3 * n];
    for r in 0..n {
        for c in 0..n {
            let bit = 1u32 << cells[r * n + c];
            for slot in [r, n + c, 2 * n + shape.box_of(r, c)] {
                if seen[slot] & bit != 0 {
                    return false;
                }
                seen[slot] |= bit;
            }
        }
    }
    true
}

/// Result of exhaustive backtracking, with the count capped at a limit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SolveReport {
    pub count: usize,
    pub first: Option<Vec<u8>>,
}

struct Solver {
    shape: BoxShape,
    n: usize,
    rows: Vec<u32>,
    cols: Vec<u32>,
    boxes: Vec<u32>,
    cells: Vec<u8>,
}

impl Solver {
    /// `None` when the givens already repeat a digit.
    fn new(shape: BoxShape, grid: &[u8]) -> Option<Self> {
        let n = shape.side();
        let mut s = Solver {
            shape,
            n,
            rows: vec![0; n],
            cols: vec![0; n],
            boxes: vec![0; n],
            cells: grid.to_vec(),
        };
        for i in 0..grid.len() {
            let v = grid[i];
            if v == 0 {
                continue;
            }
            if v as usize > n {
                return None;
            }
            let (r, c) = (i / n, i % n);
            let bit = 1u32 << v;
            let b = shape.box_of(r, c);
            if (s.rows[r] | s.cols[c] | s.boxes[b]) & bit != 0 {
                return None;
            }
            s.place(r, c, bit);
        }
        Some(s)
    }

    fn place(&mut self, r: usize, c: usize, bit: u32) {
        self.rows[r] |= bit;
        self.cols[c] |= bit;
        self.boxes[self.shape.box_of(r, c)] |= bit;
    }

    fn unplace(&mut self, r: usize, c: usize, bit: u32) {
        self.rows[r] &= !bit;
        self.cols[c] &= !bit;
        self.boxes[self.shape.box_of(r, c)] &= !bit;
    }

    fn candidates(&self, r: usize, c: usize) -> u32 {
        let all = ((1u32 << (self.n + 1)) - 1) & !1;
        all & !(self.rows[r] | self.cols[c] | self.boxes[self.shape.box_of(r, c)])
    }

    /// Most-constrained blank cell and its candidates.
    fn pick(&self) -> Option<(usize, u32)> {
        let mut best: Option<(usize, u32)> = None;
        for i in 0..self.cells.len() {
            if self.cells[i] != 0 {
                continue;
            }
            let cand = self.candidates(i / self.n, i % self.n);
            if best.map_or(true, |(_, b)| cand.count_ones() < b.count_ones()) {
                best = Some((i, cand));
                if cand.count_ones() <= 1 {
                    break;
                }
            }
        }
        best
    }

    fn count(&mut self, limit: usize, report: &mut SolveReport) {
        let Some((i, cand)) = self.pick() else {
            report.count += 1;
            if report.first.is_none() {
                report.first = Some(self.cells.clone());
            }
            return;
        };
        let (r, c) = (i / self.n, i % self.n);
        for v in 1..=self.n as u8 {
            let bit = 1u32 << v;
            if cand & bit == 0 {
                continue;
            }
            self.cells[i] = v;
            self.place(r, c, bit);
            self.count(limit, report);
            self.unplace(r, c, bit);
            self.cells[i] = 0;
            if report.count >= limit {
                return;
            }
        }
    }

    fn fill_random(&mut self, rng: &mut impl Rng) -> bool {
        let Some((i, cand)) = self.pick() else { return true };
        let (r, c) = (i / self.n, i % self.n);
        let mut digits: Vec<u8> = (1..=self.n as u8).filter(|v| cand & (1 << v) != 0).collect();
        digits.shuffle(rng);
        for v in digits {
            let bit = 1u32 << v;
            self.cells[i] = v;
            self.place(r, c, bit);
            if self.fill_random(rng) {
                return true;
            }
            self.unplace(r, c, bit);
            self.cells[i] = 0;
        }
        false
    }
}

/// Counts solutions up to `limit` by exhaustive backtracking. Contradictory
/// givens yield zero solutions.
pub fn count_solutions(shape: BoxShape, grid: &[u8], limit: usize) -> SolveReport {
    let mut report = SolveReport { count: 0, first: None };
    if grid.len() != shape.cells() {
        return report;
    }
    if let Some(mut solver) = Solver::new(shape, grid) {
        solver.count(limit.max(1), &mut report);
    }
    report
}

/// Backtracking solve reporting 0, 1 or 2 (meaning "at least two") solutions.
pub fn solve_backtracking(shape: BoxShape, grid: &[u8]) -> SolveReport {
    count_solutions(shape, grid, 2)
}

/// Uniformly shuffled complete grid.
pub fn random_solution(shape: BoxShape, rng: &mut impl Rng) -> Vec<u8> {
    let mut solver = Solver::new(shape, &vec![0; shape.cells()]).expect("empty grid");
    assert!(solver.fill_random(rng), "empty grid always completes");
    solver.cells
}

/// Unique-solution puzzle with a givens count inside `givens` (inclusive).
///
/// Cells are cleared in random order, keeping each removal only while the
/// puzzle stays uniquely solvable. Grids whose minimal puzzle still has too
/// many givens are discarded and regenerated.
pub fn gen_puzzle(shape: BoxShape, seed: u64, givens: (usize, usize)) -> Puzzle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = (givens.0.min(shape.cells()), givens.1.min(shape.cells()));
    loop {
        let solution = random_solution(shape, &mut rng);
        let target = rng.gen_range(lo..=hi.max(lo));
        let mut grid = solution.clone();
        let mut order: Vec<usize> = (0..grid.len()).collect();
        order.shuffle(&mut rng);
        let mut remaining = grid.len();
        for i in order {
            if remaining <= target {
                break;
            }
            let v = std::mem::replace(&mut grid[i], 0);
            if solve_backtracking(shape, &grid).count == 1 {
                remaining -= 1;
            } else {
                grid[i] = v;
            }
        }
        if (lo..=hi).contains(&remaining) {
            return Puzzle { shape, grid, solution };
        }
    }
}

/// 4x4 puzzle with `givens` in the inclusive range, fully determined by `seed`.
pub fn gen_micro_sudoku(seed: u64, givens: (usize, usize)) -> Puzzle {
    gen_puzzle(BoxShape::MICRO, seed, givens)
}

/// Derives an independent stream seed for item `index`.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `count` micro puzzles; puzzle `i` depends only on `(seed, i)`.
pub fn gen_micro_dataset(count: usize, seed: u64, givens: (usize, usize)) -> Vec<Puzzle> {
    (0..count as u64).into_par_iter().map(|i| gen_micro_sudoku(mix_seed(seed, i), givens)).collect()
}

/// Train/eval split where no eval puzzle grid also appears in the train set.
pub fn gen_micro_split(
    train: usize,
    eval: usize,
    seed: u64,
    givens: (usize, usize),
) -> (Vec<Puzzle>, Vec<Puzzle>) {
    let train_set = gen_micro_dataset(train, seed, givens);
    let seen: HashSet<&[u8]> = train_set.iter().map(|p| p.grid.as_slice()).collect();
    let mut eval_set = Vec::with_capacity(eval);
    let eval_seed = mix_seed(seed, u64::MAX);
    let mut next = 0u64;
    while eval_set.len() < eval {
        let want = eval - eval_set.len();
        let batch: Vec<Puzzle> = (next..next + want as u64)
            .into_par_iter()
            .map(|i| gen_micro_sudoku(mix_seed(eval_seed, i), givens))
            .collect();
        next += want as u64;
        let mut local: HashSet<Vec<u8>> = eval_set.iter().map(|p: &Puzzle| p.grid.clone()).collect();
        for p in batch {
            if !seen.contains(p.grid.as_slice()) && local.insert(p.grid.clone()) {
                eval_set.push(p);
            }
        }
    }
    (train_set, eval_set)
}

/// Composition of validity-preserving symmetries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AugmentOps {
    /// `digit_map[d - 1]` is the new label of digit `d`.
    pub digit_map: Vec<u8>,
    pub band_perm: Vec<usize>,
    pub stack_perm: Vec<usize>,
    /// Row order inside each band.
    pub row_perms: Vec<Vec<usize>>,
    /// Column order inside each stack.
    pub col_perms: Vec<Vec<usize>>,
    /// Only honored for square boxes.
    pub transpose: bool,
}

impl AugmentOps {
    pub fn identity(shape: BoxShape) -> Self {
        let (br, bc, n) = (shape.box_rows, shape.box_cols, shape.side());
        AugmentOps {
            digit_map: (1..=n as u8).collect(),
            band_perm: (0..bc).collect(),
            stack_perm: (0..br).collect(),
            row_perms: vec![(0..br).collect(); bc],
            col_perms: vec![(0..bc).collect(); br],
            transpose: false,
        }
    }

    pub fn random(shape: BoxShape, rng: &mut impl Rng) -> Self {
        let mut ops = Self::identity(shape);
        ops.digit_map.shuffle(rng);
        ops.band_perm.shuffle(rng);
        ops.stack_perm.shuffle(rng);
        ops.row_perms.iter_mut().for_each(|p| p.shuffle(rng));
        ops.col_perms.iter_mut().for_each(|p| p.shuffle(rng));
        ops.transpose = shape.box_rows == shape.box_cols && rng.gen_bool(0.5);
        ops
    }

    fn apply_cells(&self, shape: BoxShape, cells: &[u8]) -> Vec<u8> {
        let (br, bc, n) = (shape.box_rows, shape.box_cols, shape.side());
        let src_row = |r: usize| self.band_perm[r / br] * br + self.row_perms[r / br][r % br];
        let src_col = |c: usize| self.stack_perm[c / bc] * bc + self.col_perms[c / bc][c % bc];
        let mut out = vec![0u8; cells.len()];
        for r in 0..n {
            for c in 0..n {
                let v = cells[src_row(r) * n + src_col(c)];
                let v = if v == 0 { 0 } else { self.digit_map[v as usize - 1] };
                let (tr, tc) = if self.transpose && br == bc { (c, r) } else { (r, c) };
                out[tr * n + tc] = v;
            }
        }
        out
    }

    pub fn apply(&self, puzzle: &Puzzle) -> Puzzle {
        Puzzle {
            shape: puzzle.shape,
            grid: self.apply_cells(puzzle.shape, &puzzle.grid),
            solution: self.apply_cells(puzzle.shape, &puzzle.solution),
        }
    }
}

/// Random symmetry of `puzzle` drawn from `seed`.
pub fn augment(puzzle: &Puzzle, seed: u64) -> Puzzle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    AugmentOps::random(puzzle.shape, &mut rng).apply(puzzle)
}

/// Integer-encoded batch: `[B x L]` tokens, targets and givens mask.
#[derive(Clone, Debug, PartialEq)]
pub struct PuzzleBatch {
    pub batch: usize,
    pub seq_len: usize,
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    pub givens: Vec<bool>,
}

/// Cell tokens (0 = blank, digits as themselves) and solution targets.
pub fn encode(puzzle: &Puzzle) -> (Vec<usize>, Vec<usize>) {
    (
        puzzle.grid.iter().map(|&v| v as usize).collect(),
        puzzle.solution.iter().map(|&v| v as usize).collect(),
    )
}

pub fn decode(shape: BoxShape, tokens: &[usize], targets: &[usize]) -> Result<Puzzle, DataError> {
    let n = shape.side();
    if tokens.len() != shape.cells() || targets.len() != shape.cells() {
        return Err(DataError::Invalid(format!("expected {} cells", shape.cells())));
    }
    if let Some(&t) = tokens.iter().chain(targets).find(|&&t| t > n) {
        return Err(DataError::Invalid(format!("token {t} is not a cell value")));
    }
    Ok(Puzzle {
        shape,
        grid: tokens.iter().map(|&t| t as u8).collect(),
        solution: targets.iter().map(|&t| t as u8).collect(),
    })
}

impl PuzzleBatch {
    pub fn from_puzzles<'a>(puzzles: impl IntoIterator<Item = &'a Puzzle>) -> Self {
        let mut b = PuzzleBatch { batch: 0, seq_len: 0, tokens: Vec::new(), targets: Vec::new(), givens: Vec::new() };
        for p in puzzles {
            let (tokens, targets) = encode(p);
            b.seq_len = tokens.len();
            b.tokens.extend(tokens);
            b.targets.extend(targets);
            b.givens.extend(p.givens_mask());
            b.batch += 1;
        }
        b
    }

    /// Samples `start..start + len` as a new batch.
    pub fn slice(&self, start: usize, len: usize) -> Self {
        let (a, z) = (start * self.seq_len, (start + len) * self.seq_len);
        PuzzleBatch {
            batch: len,
            seq_len: self.seq_len,
            tokens: self.tokens[a..z].to_vec(),
            targets: self.targets[a..z].to_vec(),
            givens: self.givens[a..z].to_vec(),
        }
    }
}

fn is_cell_string(field: &str) -> bool {
    BoxShape::from_cells(field.len()).is_some()
        && field.bytes().all(|b| b.is_ascii_digit() || b == b'.')
}

fn parse_cells(field: &str) -> Vec<u8> {
    field.bytes().map(|b| if b == b'.' { 0 } else { b - b'0' }).collect()
}

/// Streaming CSV reader.
///
/// Each row must contain a puzzle string followed (in any later column) by a
/// solution string of the same length: 16 or 81 characters of digits, with
/// `.` or `0` for blanks. Other columns (ids, ratings, sources) are ignored,
/// and a first row without such fields is treated as a header. Rows whose
/// solution is invalid or contradicts a given are skipped and counted in
/// [`PuzzleReader::rejected`]; structurally malformed rows yield an error
/// carrying the 1-based row number.
pub struct PuzzleReader<R: Read> {
    records: csv::StringRecordsIntoIter<R>,
    row: usize,
    pub accepted: usize,
    pub rejected: usize,
}

impl PuzzleReader<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self, DataError> {
        Ok(Self::new(BufReader::new(File::open(path)?)))
    }
}

impl<R: Read> PuzzleReader<R> {
    pub fn new(reader: R) -> Self {
        let records = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(reader)
            .into_records();
        PuzzleReader { records, row: 0, accepted: 0, rejected: 0 }
    }

    fn parse(&mut self, record: &csv::StringRecord) -> Option<Result<Puzzle, DataError>> {
        let fields: Vec<&str> = record.iter().filter(|f| is_cell_string(f)).collect();
        if fields.len() < 2 {
            if self.row == 1 && fields.is_empty() {
                return None;
            }
            let msg = format!("expected puzzle and solution strings, found {} cell field(s)", fields.len());
            return Some(Err(DataError::Malformed { row: self.row, msg }));
        }
        let (puzzle, solution) = (fields[0], fields[1]);
        if puzzle.len() != solution.len() {
            let msg = format!("puzzle has {} cells, solution {}", puzzle.len(), solution.len());
            return Some(Err(DataError::Malformed { row: self.row, msg }));
        }
        let shape = BoxShape::from_cells(puzzle.len()).expect("checked by is_cell_string");
        let p = Puzzle { shape, grid: parse_cells(puzzle), solution: parse_cells(solution) };
        if p.is_consistent() {
            self.accepted += 1;
            Some(Ok(p))
        } else {
            self.rejected += 1;
            None
        }
    }
}

impl<R: Read> Iterator for PuzzleReader<R> {
    type Item = Result<Puzzle, DataError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let record = match self.records.next()? {
                Ok(r) => r,
                Err(e) => {
                    self.row += 1;
                    return Some(Err(DataError::Malformed { row: self.row, msg: e.to_string() }));
                }
            };
            self.row += 1;
            if let Some(item) = self.parse(&record) {
                return Some(item);
            }
        }
    }
}

/// Reads every puzzle, failing on the first malformed row.
pub fn load_csv(path: &Path) -> Result<(Vec<Puzzle>, usize), DataError> {
    let mut reader = PuzzleReader::open(path)?;
    let puzzles = reader.by_ref().collect::<Result<Vec<_>, _>>()?;
    Ok((puzzles, reader.rejected))
}

pub fn write_csv<W: Write>(out: W, puzzles: &[Puzzle]) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["puzzle", "solution"])?;
    for p in puzzles {
        w.write_record([p.grid_string(), p.solution_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const SOLVED: [u8; 16] = [1, 2, 3, 4, 3, 4, 1, 2, 2, 1, 4, 3, 4, 3, 2, 1];

    #[test]
    fn empty_grid_has_multiple_solutions() {
        assert_eq!(solve_backtracking(BoxShape::MICRO, &[0; 16]).count, 2);
    }

    #[test]
    fn complete_grid_is_its_own_unique_solution() {
        let r = solve_backtracking(BoxShape::MICRO, &SOLVED);
        assert_eq!(r.count, 1);
        assert_eq!(r.first.as_deref(), Some(&SOLVED[..]));
    }

    #[test]
    fn duplicate_in_row_has_no_solution() {
        let mut grid = [0u8; 16];
        grid[0] = 3;
        grid[2] = 3;
        assert_eq!(solve_backtracking(BoxShape::MICRO, &grid).count, 0);
    }

    #[test]
    fn generator_is_seed_deterministic_and_in_range() {
        for seed in 0..50 {
            let a = gen_micro_sudoku(seed, (5, 9));
            assert_eq!(a, gen_micro_sudoku(seed, (5, 9)));
            assert!((5..=9).contains(&a.givens()), "{}", a.givens());
            assert!(a.is_consistent());
            assert_eq!(solve_backtracking(a.shape, &a.grid).count, 1);
        }
    }

    #[test]
    fn classic_generation_works() {
        let p = gen_puzzle(BoxShape::CLASSIC, 3, (30, 40));
        assert!(p.is_consistent());
        assert_eq!(solve_backtracking(p.shape, &p.grid).count, 1);
    }

    #[test]
    fn identity_augmentation_is_a_no_op() {
        let p = gen_micro_sudoku(9, (4, 12));
        assert_eq!(AugmentOps::identity(p.shape).apply(&p), p);
        let q = gen_puzzle(BoxShape::CLASSIC, 1, (30, 40));
        assert_eq!(AugmentOps::identity(q.shape).apply(&q), q);
    }

    #[test]
    fn augmentation_preserves_validity_and_uniqueness() {
        for seed in 0..100 {
            let p = gen_micro_sudoku(seed, (4, 12));
            let a = augment(&p, seed + 1000);
            assert!(a.is_consistent());
            assert_eq!(a.givens(), p.givens());
            assert_eq!(solve_backtracking(a.shape, &a.grid).count, 1);
        }
    }

    #[test]
    fn digit_relabel_is_a_bijection() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let ops = AugmentOps::random(BoxShape::CLASSIC, &mut rng);
            let mut sorted = ops.digit_map.clone();
            sorted.sort();
            assert_eq!(sorted, (1..=9).collect::<Vec<u8>>());
        }
    }

    #[test]
    fn encode_decode_round_trip() {
        let p = gen_micro_sudoku(11, (4, 12));
        let (t, s) = encode(&p);
        assert_eq!(decode(p.shape, &t, &s).unwrap(), p);
        assert!(t.iter().all(|&x| x < BoxShape::MICRO.vocab()));
    }

    #[test]
    fn csv_accepts_header_blank_styles_and_counts_rejections() {
        let sol = "1234341221434321";
        let text = format!(
            "id,question,answer\n1,{},{sol}\n2,0000000000000000,{sol}\n3,2...............,{sol}\n4,1...,{sol}\n",
            "1.3.3.1.2.4.4.2."
        );
        let mut reader = PuzzleReader::new(text.as_bytes());
        let first = reader.next().unwrap().unwrap();
        assert_eq!(first.givens(), 8);
        let second = reader.next().unwrap().unwrap();
        assert_eq!(second.givens(), 0);
        // Row 4 (given disagrees with solution) is skipped; row 5 is malformed.
        match reader.next().unwrap() {
            Err(DataError::Malformed { row, .. }) => assert_eq!(row, 5),
            other => panic!("{other:?}"),
        }
        assert_eq!(reader.rejected, 1);
        assert!(reader.next().is_none());
    }

    #[test]
    fn csv_write_then_read_is_identity() {
        let puzzles: Vec<Puzzle> = (0..20).map(|s| gen_micro_sudoku(s, (4, 12))).collect();
        let mut buf = Vec::new();
        write_csv(&mut buf, &puzzles).unwrap();
        let back: Vec<Puzzle> = PuzzleReader::new(buf.as_slice()).collect::<Result<_, _>>().unwrap();
        assert_eq!(back, puzzles);
    }

    #[test]
    fn split_has_no_eval_grid_in_train() {
        let (train, eval) = gen_micro_split(300, 50, 7, (4, 12));
        assert_eq!((train.len(), eval.len()), (300, 50));
        let seen: HashSet<_> = train.iter().map(|p| p.grid.clone()).collect();
        assert!(eval.iter().all(|p| !seen.contains(&p.grid)));
    }
}
