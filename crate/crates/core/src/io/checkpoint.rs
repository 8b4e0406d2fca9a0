//! Versioned binary checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "DGDN1"                      magic, 5 bytes
//! u32 version                  currently 1
//! u32 input_height, input_width, channels, classes, layer count
//! per layer: u32 dicts, dict_h, dict_w, pool_y, pool_x
//! f64 a_s, b_s, a_e, b_e, a_w, b_w, svm_gamma, beta_floor
//! u64 n, n x f64               dictionaries (layer, element, Tensor3 data order)
//! u64 n, n x f64               SVM weights, class-major (empty if unsupervised)
//! u64 n, n x f64               RMSprop accumulators (empty if none)
//! u64 seed, u64 stream, u64 word_pos_lo, u64 word_pos_hi
//! u64 iteration
//! f64 data_min, f64 data_max   pixel range seen at training time
//! u32 crc32                    over every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crate::distributions::RngStream;
use crate::error::{Error, Result};
use crate::model::{DictionarySet, Hyperparams, LayerSpec, NetworkSpec};
use crate::svm::SvmState;

pub const MAGIC: &[u8; 5] = b"DGDN1";
pub const VERSION: u32 = 1;

/// Position of a random stream, enough to resume it exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RngSnapshot {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

impl RngSnapshot {
    pub fn of(rng: &RngStream) -> Self {
        RngSnapshot {
            seed: rng.seed(),
            stream: rng.stream(),
            word_pos: rng.word_pos(),
        }
    }

    pub fn restore(&self) -> RngStream {
        let mut r = RngStream::new(self.seed, self.stream);
        r.set_word_pos(self.word_pos);
        r
    }
}

/// Global parameters plus the optimiser and sampler state needed to resume.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub dicts: DictionarySet,
    /// Present for supervised models.
    pub svm: Option<SvmState>,
    pub rmsprop: Vec<f64>,
    pub rng: RngSnapshot,
    pub iteration: u64,
    pub data_range: (f64, f64),
}

impl Checkpoint {
    pub fn new(spec: NetworkSpec, dicts: DictionarySet, svm: Option<SvmState>) -> Self {
        Checkpoint {
            spec,
            dicts,
            svm,
            rmsprop: Vec::new(),
            rng: RngSnapshot::default(),
            iteration: 0,
            data_range: (0.0, 1.0),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        put_u32(&mut w, VERSION);
        let s = &self.spec;
        for v in [
            s.input_height,
            s.input_width,
            s.channels,
            s.classes,
            s.layers.len(),
        ] {
            put_u32(&mut w, to_u32(v)?);
        }
        for l in &s.layers {
            for v in [l.dicts, l.dict_h, l.dict_w, l.pool_y, l.pool_x] {
                put_u32(&mut w, to_u32(v)?);
            }
        }
        let h = &s.hyper;
        for v in [
            h.a_s,
            h.b_s,
            h.a_e,
            h.b_e,
            h.a_w,
            h.b_w,
            h.svm_gamma,
            h.beta_floor,
        ] {
            put_f64(&mut w, v);
        }
        put_array(&mut w, &self.dicts.to_flat());
        let betas: Vec<f64> = match &self.svm {
            Some(svm) => svm.betas.iter().flatten().copied().collect(),
            None => Vec::new(),
        };
        put_array(&mut w, &betas);
        put_array(&mut w, &self.rmsprop);
        put_u64(&mut w, self.rng.seed);
        put_u64(&mut w, self.rng.stream);
        put_u64(&mut w, self.rng.word_pos as u64);
        put_u64(&mut w, (self.rng.word_pos >> 64) as u64);
        put_u64(&mut w, self.iteration);
        put_f64(&mut w, self.data_range.0);
        put_f64(&mut w, self.data_range.1);
        let crc = crc32fast::hash(&w);
        put_u32(&mut w, crc);
        Ok(w)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let err = |msg: &str| Error::Format {
            kind: "checkpoint",
            path: path.to_path_buf(),
            msg: msg.to_string(),
        };
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(err("missing DGDN1 magic"));
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        let mut r = Reader {
            buf: body,
            pos: MAGIC.len(),
        };
        let version = r.u32().ok_or_else(|| err("truncated header"))?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let trunc = || err("truncated body");
        let mut dims = [0usize; 5];
        for d in dims.iter_mut() {
            *d = r.u32().ok_or_else(trunc)? as usize;
        }
        let [h, w, c, classes, nl] = dims;
        if nl > 64 {
            return Err(err("implausible layer count"));
        }
        let mut layers = Vec::with_capacity(nl);
        for _ in 0..nl {
            let mut v = [0usize; 5];
            for x in v.iter_mut() {
                *x = r.u32().ok_or_else(trunc)? as usize;
            }
            layers.push(LayerSpec::new(v[0], v[1], v[2], v[3], v[4]));
        }
        let mut hp = [0.0f64; 8];
        for x in hp.iter_mut() {
            *x = r.f64().ok_or_else(trunc)?;
        }
        let hyper = Hyperparams {
            a_s: hp[0],
            b_s: hp[1],
            a_e: hp[2],
            b_e: hp[3],
            a_w: hp[4],
            b_w: hp[5],
            svm_gamma: hp[6],
            beta_floor: hp[7],
        };
        let spec = NetworkSpec::new(h, w, c, classes, layers, hyper)?;
        let flat = r.array().ok_or_else(trunc)?;
        let mut dicts = DictionarySet::zeros(&spec);
        dicts.copy_from_flat(&flat)?;
        let betas = r.array().ok_or_else(trunc)?;
        let svm = if spec.supervised() {
            let dim = spec.feature_len() + 1;
            if betas.len() != dim * classes {
                return Err(err("SVM weight block has the wrong length"));
            }
            Some(SvmState {
                betas: betas.chunks(dim).map(|c| c.to_vec()).collect(),
                gamma: hyper.svm_gamma,
                beta_floor: hyper.beta_floor,
            })
        } else {
            if !betas.is_empty() {
                return Err(err("unsupervised checkpoint carries SVM weights"));
            }
            None
        };
        let rmsprop = r.array().ok_or_else(trunc)?;
        if !rmsprop.is_empty() && rmsprop.len() != dicts.param_len() {
            return Err(err("RMSprop block has the wrong length"));
        }
        let seed = r.u64().ok_or_else(trunc)?;
        let stream = r.u64().ok_or_else(trunc)?;
        let lo = r.u64().ok_or_else(trunc)? as u128;
        let hi = r.u64().ok_or_else(trunc)? as u128;
        let iteration = r.u64().ok_or_else(trunc)?;
        let dmin = r.f64().ok_or_else(trunc)?;
        let dmax = r.f64().ok_or_else(trunc)?;
        if r.pos != body.len() {
            return Err(err("trailing bytes before checksum"));
        }
        Ok(Checkpoint {
            spec,
            dicts,
            svm,
            rmsprop,
            rng: RngSnapshot {
                seed,
                stream,
                word_pos: lo | (hi << 64),
            },
            iteration,
            data_range: (dmin, dmax),
        })
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, ck.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?, path)
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v)
        .map_err(|_| Error::param(format!("{v} does not fit the checkpoint's u32 field")))
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(w: &mut Vec<u8>, v: u64) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(w: &mut Vec<u8>, v: f64) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_array(w: &mut Vec<u8>, a: &[f64]) {
    put_u64(w, a.len() as u64);
    for &v in a {
        put_f64(w, v);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let s = self.buf.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8)
            .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Option<f64> {
        self.take(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn array(&mut self) -> Option<Vec<f64>> {
        let n = usize::try_from(self.u64()?).ok()?;
        let bytes = self.take(n.checked_mul(8)?)?;
        Some(
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        )
    }
}
