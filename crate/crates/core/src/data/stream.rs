use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufRead, BufReader, Lines};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use csv::StringRecord;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::csv::{map_csv_error, open_reader, record_line, CsvLayout, CsvSchema};
use super::libsvm::{parse_line, scan_libsvm_num_features};
use super::{Batch, BatchId, DataError, Example};
use crate::boosting::mix_seed;

/// Shuffling buffers this many batches.
const SHUFFLE_WINDOW: usize = 16;

pub trait BatchSource {
    /// Next batch, or `None` once the configured epochs are exhausted.
    fn next_batch(&mut self) -> Result<Option<Batch>, DataError>;
}

impl<T: BatchSource + ?Sized> BatchSource for Box<T> {
    fn next_batch(&mut self) -> Result<Option<Batch>, DataError> {
        (**self).next_batch()
    }
}

impl<T: BatchSource + ?Sized> BatchSource for &mut T {
    fn next_batch(&mut self) -> Result<Option<Batch>, DataError> {
        (**self).next_batch()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataFormat {
    Csv(CsvSchema),
    Libsvm,
}

impl DataFormat {
    /// CSV for `.csv` files, libsvm otherwise.
    pub fn detect(path: &Path, schema: CsvSchema) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => DataFormat::Csv(schema),
            _ => DataFormat::Libsvm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamOptions {
    pub batch_size: usize,
    /// Passes over the data; 0 cycles until the consumer stops.
    pub epochs: u32,
    pub shuffle_seed: Option<u64>,
    pub skip_bad_rows: bool,
}

impl Default for StreamOptions {
    fn default() -> Self {
        Self {
            batch_size: 256,
            epochs: 1,
            shuffle_seed: None,
            skip_bad_rows: false,
        }
    }
}

fn shuffle_rng(seed: u64, worker: u32, round: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, (u64::from(worker) << 40) ^ round))
}

/// Worker `worker` of `num_workers` over an in-memory dataset; takes every
/// example whose index is congruent to `worker`.
#[derive(Debug, Clone)]
pub struct InMemorySource {
    examples: Arc<Vec<Example>>,
    own: Vec<usize>,
    order: Vec<usize>,
    worker: u32,
    options: StreamOptions,
    epoch: u32,
    pos: usize,
    iteration: u64,
}

impl InMemorySource {
    pub fn new(examples: Vec<Example>, options: StreamOptions) -> Self {
        Self::partitioned(Arc::new(examples), 0, 1, options)
    }

    pub fn partitioned(
        examples: Arc<Vec<Example>>,
        worker: u32,
        num_workers: u32,
        options: StreamOptions,
    ) -> Self {
        assert!(num_workers > 0 && worker < num_workers && options.batch_size > 0);
        let own: Vec<usize> = (worker as usize..examples.len())
            .step_by(num_workers as usize)
            .collect();
        let mut s = Self {
            examples,
            order: Vec::new(),
            own,
            worker,
            options,
            epoch: 0,
            pos: 0,
            iteration: 0,
        };
        s.start_epoch();
        s
    }

    fn start_epoch(&mut self) {
        self.order = self.own.clone();
        if let Some(seed) = self.options.shuffle_seed {
            self.order
                .shuffle(&mut shuffle_rng(seed, self.worker, u64::from(self.epoch)));
        }
        self.pos = 0;
    }

    fn exhausted(&self) -> bool {
        self.options.epochs != 0 && self.epoch >= self.options.epochs
    }
}

impl BatchSource for InMemorySource {
    fn next_batch(&mut self) -> Result<Option<Batch>, DataError> {
        if self.own.is_empty() {
            return Ok(None);
        }
        let mut examples = Vec::with_capacity(self.options.batch_size);
        while examples.len() < self.options.batch_size && !self.exhausted() {
            if self.pos == self.order.len() {
                self.epoch += 1;
                if self.exhausted() {
                    break;
                }
                self.start_epoch();
            }
            examples.push(self.examples[self.order[self.pos]].clone());
            self.pos += 1;
        }
        if examples.is_empty() {
            return Ok(None);
        }
        let id = BatchId {
            worker: self.worker,
            iteration: self.iteration,
        };
        self.iteration += 1;
        Ok(Some(Batch { id, examples }))
    }
}

enum Reader {
    Csv {
        reader: csv::Reader<File>,
        layout: CsvLayout,
        record: StringRecord,
    },
    Libsvm {
        lines: Lines<BufReader<File>>,
        line_no: u64,
    },
}

/// Streams one worker's share of a file, holding at most one shuffle
/// window of examples in memory.
pub struct FileStream {
    path: PathBuf,
    format: DataFormat,
    num_features: usize,
    worker: u32,
    num_workers: u32,
    options: StreamOptions,
    reader: Option<Reader>,
    epoch: u32,
    example_index: u64,
    any_this_epoch: bool,
    iteration: u64,
    skipped: u64,
    buffer: VecDeque<Example>,
    refills: u64,
}

impl FileStream {
    /// Opens the stream. For libsvm input without `num_features` the file
    /// is scanned once to fix the feature space.
    pub fn open(
        path: impl AsRef<Path>,
        format: DataFormat,
        num_features: Option<usize>,
        worker: u32,
        num_workers: u32,
        options: StreamOptions,
    ) -> Result<Self, DataError> {
        if num_workers == 0 || worker >= num_workers {
            return Err(DataError::Config(format!(
                "worker {worker} outside {num_workers} workers"
            )));
        }
        if options.batch_size == 0 {
            return Err(DataError::Config("batch_size must be positive".into()));
        }
        let path = path.as_ref().to_path_buf();
        let mut s = Self {
            path,
            format,
            num_features: 0,
            worker,
            num_workers,
            options,
            reader: None,
            epoch: 0,
            example_index: 0,
            any_this_epoch: false,
            iteration: 0,
            skipped: 0,
            buffer: VecDeque::new(),
            refills: 0,
        };
        s.reopen()?;
        s.num_features = match (&s.reader, num_features) {
            (Some(Reader::Csv { layout, .. }), _) => layout.num_features(),
            (_, Some(n)) => n,
            (_, None) => scan_libsvm_num_features(&s.path)?,
        };
        Ok(s)
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    /// Rows dropped under `skip_bad_rows`.
    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    fn reopen(&mut self) -> Result<(), DataError> {
        self.example_index = 0;
        self.any_this_epoch = false;
        self.reader = Some(match &self.format {
            DataFormat::Csv(schema) => {
                let mut reader = open_reader(&self.path)?;
                let layout =
                    CsvLayout::from_headers(reader.headers().map_err(map_csv_error)?, schema)?;
                Reader::Csv {
                    reader,
                    layout,
                    record: StringRecord::new(),
                }
            }
            DataFormat::Libsvm => Reader::Libsvm {
                lines: BufReader::new(File::open(&self.path)?).lines(),
                line_no: 0,
            },
        });
        Ok(())
    }

    /// Next parsed row of the file, any worker's.
    fn next_row(&mut self) -> Result<Option<Result<Example, DataError>>, DataError> {
        let limit = (self.num_features > 0).then_some(self.num_features);
        match self.reader.as_mut().expect("open reader") {
            Reader::Csv {
                reader,
                layout,
                record,
            } => match reader.read_record(record) {
                Ok(false) => Ok(None),
                Ok(true) => Ok(Some(layout.parse_record(record, record_line(record)))),
                Err(e) if e.is_io_error() => Err(map_csv_error(e)),
                Err(e) => Ok(Some(Err(map_csv_error(e)))),
            },
            Reader::Libsvm { lines, line_no } => loop {
                let Some(line) = lines.next() else {
                    return Ok(None);
                };
                *line_no += 1;
                match parse_line(&line?, *line_no, limit) {
                    Ok(None) => continue,
                    Ok(Some(ex)) => return Ok(Some(Ok(ex))),
                    Err(e) => return Ok(Some(Err(e))),
                }
            },
        }
    }

    fn next_example(&mut self) -> Result<Option<Example>, DataError> {
        loop {
            if self.reader.is_none() {
                return Ok(None);
            }
            match self.next_row()? {
                None => {
                    self.epoch += 1;
                    let more = self.options.epochs == 0 || self.epoch < self.options.epochs;
                    if more && self.any_this_epoch {
                        self.reopen()?;
                    } else {
                        self.reader = None;
                    }
                }
                Some(Err(e)) if self.options.skip_bad_rows => {
                    log::warn!("skipping bad row: {e}");
                    self.skipped += 1;
                }
                Some(Err(e)) => return Err(e),
                Some(Ok(ex)) => {
                    let idx = self.example_index;
                    self.example_index += 1;
                    if idx % u64::from(self.num_workers) == u64::from(self.worker) {
                        self.any_this_epoch = true;
                        return Ok(Some(ex));
                    }
                }
            }
        }
    }
}

impl BatchSource for FileStream {
    fn next_batch(&mut self) -> Result<Option<Batch>, DataError> {
        let bs = self.options.batch_size;
        let mut examples = Vec::with_capacity(bs);
        match self.options.shuffle_seed {
            None => {
                while examples.len() < bs {
                    match self.next_example()? {
                        Some(ex) => examples.push(ex),
                        None => break,
                    }
                }
            }
            Some(seed) => {
                if self.buffer.len() < bs {
                    let mut fresh = Vec::new();
                    while fresh.len() < bs * SHUFFLE_WINDOW {
                        match self.next_example()? {
                            Some(ex) => fresh.push(ex),
                            None => break,
                        }
                    }
                    fresh.shuffle(&mut shuffle_rng(seed, self.worker, self.refills));
                    self.refills += 1;
                    self.buffer.extend(fresh);
                }
                while examples.len() < bs {
                    match self.buffer.pop_front() {
                        Some(ex) => examples.push(ex),
                        None => break,
                    }
                }
            }
        }
        if examples.is_empty() {
            return Ok(None);
        }
        let id = BatchId {
            worker: self.worker,
            iteration: self.iteration,
        };
        self.iteration += 1;
        Ok(Some(Batch { id, examples }))
    }
}

/// One stream per worker over the same file.
pub fn worker_sources(
    path: impl AsRef<Path>,
    format: &DataFormat,
    num_features: Option<usize>,
    num_workers: u32,
    options: StreamOptions,
) -> Result<Vec<FileStream>, DataError> {
    let path = path.as_ref();
    let num_features = match (format, num_features) {
        (DataFormat::Libsvm, None) => Some(scan_libsvm_num_features(path)?),
        (_, n) => n,
    };
    (0..num_workers)
        .map(|w| FileStream::open(path, format.clone(), num_features, w, num_workers, options))
        .collect()
}

/// Keeps a copy of every batch handed out.
pub struct RecordingSource<S> {
    inner: S,
    recorded: Vec<Batch>,
}

impl<S: BatchSource> RecordingSource<S> {
    pub fn new(inner: S) -> Self {
        Self {
            inner,
            recorded: Vec::new(),
        }
    }

    pub fn batches(&self) -> &[Batch] {
        &self.recorded
    }

    pub fn into_batches(self) -> Vec<Batch> {
        self.recorded
    }
}

impl<S: BatchSource> BatchSource for RecordingSource<S> {
    fn next_batch(&mut self) -> Result<Option<Batch>, DataError> {
        let b = self.inner.next_batch()?;
        if let Some(b) = &b {
            self.recorded.push(b.clone());
        }
        Ok(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FeatureVector;

    fn toy(n: usize) -> Vec<Example> {
        (0..n)
            .map(|i| Example::new(FeatureVector::from_dense(&[Some(i as f64)]), i as f64))
            .collect()
    }

    fn labels(src: &mut dyn BatchSource) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        while let Some(b) = src.next_batch().unwrap() {
            out.push(b.examples.iter().map(|e| e.label).collect());
        }
        out
    }

    fn opts(batch_size: usize, epochs: u32) -> StreamOptions {
        StreamOptions {
            batch_size,
            epochs,
            ..StreamOptions::default()
        }
    }

    #[test]
    fn in_memory_batches_and_epochs() {
        let mut s = InMemorySource::new(toy(5), opts(2, 2));
        assert_eq!(
            labels(&mut s),
            vec![
                vec![0.0, 1.0],
                vec![2.0, 3.0],
                vec![4.0, 0.0],
                vec![1.0, 2.0],
                vec![3.0, 4.0]
            ]
        );
    }

    #[test]
    fn workers_partition_round_robin() {
        let data = Arc::new(toy(7));
        let mut seen = Vec::new();
        for w in 0..3 {
            let mut s = InMemorySource::partitioned(data.clone(), w, 3, opts(10, 1));
            let l = labels(&mut s).concat();
            assert!(l.iter().all(|v| *v as u32 % 3 == w));
            seen.extend(l);
        }
        seen.sort_by(f64::total_cmp);
        assert_eq!(seen, (0..7).map(|i| i as f64).collect::<Vec<_>>());
    }

    #[test]
    fn shuffle_is_seeded() {
        let o = StreamOptions {
            shuffle_seed: Some(4),
            ..opts(3, 1)
        };
        let a = labels(&mut InMemorySource::new(toy(20), o));
        let b = labels(&mut InMemorySource::new(toy(20), o));
        assert_eq!(a, b);
        let mut flat = a.concat();
        assert_ne!(flat, (0..20).map(|i| i as f64).collect::<Vec<_>>());
        flat.sort_by(f64::total_cmp);
        assert_eq!(flat, (0..20).map(|i| i as f64).collect::<Vec<_>>());
    }

    #[test]
    fn cycling_stream_keeps_going() {
        let mut s = InMemorySource::new(toy(3), opts(2, 0));
        for _ in 0..50 {
            assert_eq!(s.next_batch().unwrap().unwrap().len(), 2);
        }
    }

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn file_stream_matches_in_memory() {
        let dir = tempfile::tempdir().unwrap();
        let mut text = String::from("x,label\n");
        for i in 0..11 {
            text.push_str(&format!("{i},{i}\n"));
        }
        let p = write(dir.path(), "d.csv", &text);
        let fmt = DataFormat::detect(&p, CsvSchema::default());
        for w in 0..2 {
            let mut f = FileStream::open(&p, fmt.clone(), None, w, 2, opts(3, 2)).unwrap();
            assert_eq!(f.num_features(), 1);
            let mut m = InMemorySource::partitioned(Arc::new(toy(11)), w, 2, opts(3, 2));
            assert_eq!(labels(&mut f), labels(&mut m));
        }
    }

    #[test]
    fn bad_rows_fail_or_are_counted() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "d.svm", "1 1:2\n1 x\n0 2:1\n");
        assert!(matches!(
            FileStream::open(&p, DataFormat::Libsvm, None, 0, 1, opts(10, 1)),
            Err(DataError::Parse { line: 2, .. })
        ));
        let mut f = FileStream::open(&p, DataFormat::Libsvm, Some(2), 0, 1, opts(10, 1)).unwrap();
        assert!(matches!(f.next_batch(), Err(DataError::Parse { line: 2, .. })));
        let o = StreamOptions {
            skip_bad_rows: true,
            ..opts(10, 1)
        };
        let mut f = FileStream::open(&p, DataFormat::Libsvm, Some(2), 0, 1, o).unwrap();
        assert_eq!(f.next_batch().unwrap().unwrap().len(), 2);
        assert_eq!(f.skipped(), 1);
    }

    #[test]
    fn recording_source_keeps_batches() {
        let mut r = RecordingSource::new(InMemorySource::new(toy(4), opts(3, 1)));
        labels(&mut r);
        assert_eq!(r.batches().len(), 2);
        assert_eq!(r.batches()[1].id.iteration, 1);
    }
}
