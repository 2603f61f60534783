//! Versioned binary checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! "PSIDCKPT"  u32 version
//! u32 len, UTF-8 config block ("key=value" lines)
//! u32 blob count
//! per blob: u32 name len, name, u32 rank, u32 dims[rank], f32 data
//! ```
//!
//! Blobs are the live weights (`live/…`), the EMA shadow (`ema/…`) and the
//! Adam moments (`adam_m/…`, `adam_v/…`), each in parameter-store order.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::params::ParamStore;
use crate::rng::Rng;
use crate::train::ModelState;

pub const MAGIC: &[u8; 8] = b"PSIDCKPT";
pub const VERSION: u32 = 1;

const GROUPS: [&str; 4] = ["live", "ema", "adam_m", "adam_v"];

fn config_block(cfg: &ModelConfig, step: u64) -> String {
    format!(
        "channels={}\nlatent={}\nwidth={}\nblocks={}\nheads={}\ngate_width={}\npse_blocks={}\npse_width={}\n\
         pse_hidden={}\nsteps={}\nbeta_start={}\nbeta_end={}\nmlp_hidden={}\ntime_dim={}\nstep={}\n",
        cfg.channels,
        cfg.latent,
        cfg.width,
        cfg.blocks,
        cfg.heads,
        cfg.gate_width,
        cfg.pse_blocks,
        cfg.pse_width,
        cfg.pse_hidden,
        cfg.steps,
        cfg.beta_start,
        cfg.beta_end,
        cfg.mlp_hidden,
        cfg.time_dim,
        step
    )
}

fn parse_config_block(text: &str) -> Result<(ModelConfig, u64)> {
    let mut kv = BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("malformed config line {line:?}")))?;
        kv.insert(k, v);
    }
    fn get<V: std::str::FromStr>(kv: &BTreeMap<&str, &str>, key: &str) -> Result<V> {
        kv.get(key)
            .ok_or_else(|| Error::Checkpoint(format!("config block lacks {key}")))?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad value for {key}")))
    }
    let cfg = ModelConfig {
        channels: get(&kv, "channels")?,
        latent: get(&kv, "latent")?,
        width: get(&kv, "width")?,
        blocks: get(&kv, "blocks")?,
        heads: get(&kv, "heads")?,
        gate_width: get(&kv, "gate_width")?,
        pse_blocks: get(&kv, "pse_blocks")?,
        pse_width: get(&kv, "pse_width")?,
        pse_hidden: get(&kv, "pse_hidden")?,
        steps: get(&kv, "steps")?,
        beta_start: get(&kv, "beta_start")?,
        beta_end: get(&kv, "beta_end")?,
        mlp_hidden: get(&kv, "mlp_hidden")?,
        time_dim: get(&kv, "time_dim")?,
    };
    Ok((cfg, get(&kv, "step")?))
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("size fits in u32").to_le_bytes());
}

pub fn encode(state: &ModelState<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let block = config_block(state.model.config(), state.step);
    put_u32(&mut out, block.len());
    out.extend_from_slice(block.as_bytes());
    let stores = [&state.params, &state.ema, &state.adam_m, &state.adam_v];
    put_u32(&mut out, stores.iter().map(|s| s.len()).sum());
    for (group, store) in GROUPS.iter().zip(stores) {
        for id in store.ids() {
            let name = format!("{group}/{}", store.name(id));
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            let shape = store.shape(id);
            put_u32(&mut out, shape.len());
            for &d in shape {
                put_u32(&mut out, d);
            }
            for v in store.get(id) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("file is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }
}

/// Decodes a checkpoint. With `expected`, refuses one built for a different
/// architecture and reports the first mismatching parameter shape.
pub fn decode(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<ModelState<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let block = r.string()?;
    let (cfg, step) = parse_config_block(&block)?;
    let (model, template) = Model::new::<f32>(cfg, &mut Rng::new(0))?;
    let count = r.u32()?;
    let mut names = Vec::with_capacity(count);
    let mut shapes = Vec::with_capacity(count);
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        names.push(r.string()?);
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Checkpoint("blob too large".into()))?,
        )?;
        data.push(
            raw.chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect::<Vec<_>>(),
        );
        shapes.push(shape);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last blob".into()));
    }
    if let Some(want) = expected {
        if want != &cfg {
            let (_, want_store) = Model::new::<f32>(*want, &mut Rng::new(0))?;
            let live: Vec<String> = names
                .iter()
                .filter_map(|n| n.strip_prefix("live/").map(str::to_owned))
                .collect();
            let live_shapes: Vec<Vec<usize>> = names
                .iter()
                .zip(&shapes)
                .filter(|(n, _)| n.starts_with("live/"))
                .map(|(_, s)| s.clone())
                .collect();
            let detail = match want_store.check_layout(&live, &live_shapes) {
                Err(e) => e.to_string(),
                Ok(()) => "hyperparameters differ".into(),
            };
            return Err(Error::Checkpoint(format!(
                "checkpoint does not match the configured model: {detail}"
            )));
        }
    }
    let per = template.len();
    if count != per * GROUPS.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} blobs, found {count}",
            per * GROUPS.len()
        )));
    }
    let mut stores = Vec::with_capacity(GROUPS.len());
    for (gi, group) in GROUPS.iter().enumerate() {
        let range = gi * per..(gi + 1) * per;
        let mut gnames = Vec::with_capacity(per);
        for n in &names[range.clone()] {
            let stripped = n
                .strip_prefix(group)
                .and_then(|s| s.strip_prefix('/'))
                .ok_or_else(|| Error::Checkpoint(format!("blob {n} outside group {group}")))?;
            gnames.push(stripped.to_owned());
        }
        template.check_layout(&gnames, &shapes[range.clone()])?;
        let mut store = template.clone();
        for (dst, src) in store.tensors_mut().iter_mut().zip(&data[range]) {
            dst.copy_from_slice(src);
        }
        stores.push(store);
    }
    let [params, ema, adam_m, adam_v]: [ParamStore<f32>; 4] = stores.try_into().unwrap();
    Ok(ModelState {
        model,
        params,
        adam_m,
        adam_v,
        ema,
        step,
    })
}

pub fn save(state: &ModelState<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(state)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>, expected: Option<&ModelConfig>) -> Result<ModelState<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, expected)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            channels: 1,
            latent: 8,
            width: 4,
            blocks: 1,
            heads: 2,
            gate_width: 4,
            pse_blocks: 1,
            pse_width: 4,
            pse_hidden: 8,
            steps: 3,
            beta_start: 0.1,
            beta_end: 0.3,
            mlp_hidden: 8,
            time_dim: 4,
        }
    }

    fn perturbed_state() -> ModelState<f32> {
        let mut st = ModelState::<f32>::new(tiny(), 4).unwrap();
        let mut rng = Rng::new(9);
        for store in [&mut st.ema, &mut st.adam_m, &mut st.adam_v] {
            for t in store.tensors_mut() {
                t.iter_mut().for_each(|v| *v = rng.normal() as f32);
            }
        }
        st.step = 17;
        st
    }

    #[test]
    fn round_trip_is_exact_and_stable() {
        let st = perturbed_state();
        let bytes = encode(&st);
        let back = decode(&bytes, Some(&tiny())).unwrap();
        assert_eq!(back.params, st.params);
        assert_eq!(back.ema, st.ema);
        assert_eq!(back.adam_m, st.adam_m);
        assert_eq!(back.adam_v, st.adam_v);
        assert_eq!(back.step, 17);
        assert_eq!(back.model.schedule, st.model.schedule);
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn mismatched_latent_is_refused_with_shape() {
        let bytes = encode(&perturbed_state());
        let mut other = tiny();
        other.latent = 16;
        let err = decode(&bytes, Some(&other)).unwrap_err().to_string();
        assert!(err.contains("shape"), "{err}");
    }

    #[test]
    fn corrupt_files_are_refused() {
        let bytes = encode(&perturbed_state());
        assert!(decode(&bytes[..bytes.len() - 1], None).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad, None).is_err());
        let mut ver = bytes.clone();
        ver[8] = 2;
        assert!(decode(&ver, None)
            .unwrap_err()
            .to_string()
            .contains("version"));
        let mut extra = bytes;
        extra.push(0);
        assert!(decode(&extra, None).is_err());
    }
}
