//! Synthetic sequence tasks: desk-scale stand-ins for a parallel corpus.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::seq2seq::{Batch, FIRST_CONTENT_ID};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Copy,
    Reverse,
    LookupTranslation,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::LookupTranslation => "lookup",
        }
    }

    pub fn from_name(name: &str) -> Result<TaskKind> {
        match name {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "lookup" | "lookup_translation" => Ok(TaskKind::LookupTranslation),
            other => Err(Error::Invalid(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Seed of the lookup task's fixed bijection over content tokens.
    pub dictionary_seed: u64,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, vocab_size: usize, min_len: usize, max_len: usize) -> Self {
        TaskSpec {
            kind,
            vocab_size,
            min_len,
            max_len,
            dictionary_seed: 0x4449_4354,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= FIRST_CONTENT_ID as usize {
            return Err(Error::Invalid(format!(
                "vocab of {} has no room for content tokens after the specials",
                self.vocab_size
            )));
        }
        if self.min_len == 0 || self.max_len < self.min_len {
            return Err(Error::Invalid(format!(
                "bad length range [{}, {}]",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }

    fn content_count(&self) -> usize {
        self.vocab_size - FIRST_CONTENT_ID as usize
    }

    /// The lookup task's bijection over content ids, fixed by
    /// `dictionary_seed`: a Fisher-Yates shuffle of [FIRST_CONTENT_ID, vocab).
    pub fn dictionary(&self) -> Vec<(u32, u32)> {
        let n = self.content_count();
        let mut images: Vec<u32> = (0..n as u32).map(|i| i + FIRST_CONTENT_ID).collect();
        let mut rng = RngStream::new(self.dictionary_seed);
        for i in (1..n).rev() {
            let j = rng.below((i + 1) as u64) as usize;
            images.swap(i, j);
        }
        (0..n as u32)
            .map(|i| (i + FIRST_CONTENT_ID, images[i as usize]))
            .collect()
    }

    fn map_lookup(&self, dictionary: &[(u32, u32)], id: u32) -> u32 {
        dictionary[(id - FIRST_CONTENT_ID) as usize].1
    }
}

/// Draw a batch: sources uniform over content ids with lengths uniform in
/// [min_len, max_len]; targets derived per task kind.
pub fn generate_batch(spec: &TaskSpec, rng: &mut RngStream, batch_size: usize) -> Result<Batch> {
    spec.validate()?;
    if batch_size == 0 {
        return Err(Error::Invalid("batch size must be positive".into()));
    }
    let dictionary = match spec.kind {
        TaskKind::LookupTranslation => Some(spec.dictionary()),
        _ => None,
    };
    let content = spec.content_count() as u64;
    let mut src_rows = Vec::with_capacity(batch_size);
    let mut tgt_rows = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let len = rng.range_usize(spec.min_len, spec.max_len);
        let src: Vec<u32> = (0..len)
            .map(|_| rng.below(content) as u32 + FIRST_CONTENT_ID)
            .collect();
        let tgt = match spec.kind {
            TaskKind::Copy => src.clone(),
            TaskKind::Reverse => src.iter().rev().copied().collect(),
            TaskKind::LookupTranslation => {
                let dict = dictionary.as_ref().expect("built above");
                src.iter().map(|&id| spec.map_lookup(dict, id)).collect()
            }
        };
        src_rows.push(src);
        tgt_rows.push(tgt);
    }
    Batch::new(&src_rows, &tgt_rows, spec.vocab_size)
}

/// Sidecar file for the lookup task: the full source -> target dictionary.
pub fn write_dictionary_csv(spec: &TaskSpec, path: &Path) -> Result<()> {
    let mut out = String::from("source,target\n");
    for (s, t) in spec.dictionary() {
        out.push_str(&format!("{s},{t}\n"));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
