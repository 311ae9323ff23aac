//! Whole-codec model: configuration, parameter store, and checkpoint I/O.
//!
//! A checkpoint is an ASCII key=value header (the codec configuration),
//! one blank line, then the binary parameter blob. The model digest that
//! containers embed is the FNV-1a 64 hash of the complete checkpoint bytes.

use crate::autoencoder::{register_autoencoder, AutoencoderIds, CodecConfig};
use crate::context::{register_context_models, ContextParams};
use crate::error::{Error, Result};
use crate::lossless::BaseHistogram;
use crate::params::{fnv1a64, load_blob, write_blob, ParamId, ParamStore};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

#[derive(Debug, Clone)]
pub struct CoderIds {
    pub ctx: ContextParams,
    pub hist: ParamId,
}

#[derive(Debug, Clone)]
pub struct CodecModel {
    pub config: CodecConfig,
    pub store: ParamStore<f32>,
    pub ae: AutoencoderIds,
    pub coder: Option<CoderIds>,
}

impl CodecModel {
    /// Fresh autoencoder-only model with seeded initialization.
    pub fn new(config: CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let ae = register_autoencoder(&mut store, &config, &mut rng);
        Ok(CodecModel {
            config,
            store,
            ae,
            coder: None,
        })
    }

    /// Appends freshly initialized context models and an (untrained,
    /// uniform) histogram. Call once before stage-2 training.
    pub fn add_coder(&mut self, seed: u64) {
        assert!(self.coder.is_none(), "coder already present");
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let c_total = self.config.total_channels();
        let ctx = register_context_models(
            &mut self.store,
            &mut rng,
            self.config.k_blocks,
            c_total,
            self.config.n_levels,
            self.config.ctx_hidden,
        );
        let n = self.config.n_levels as usize;
        let hist = self.store.add(
            "coder.histogram",
            Tensor::full(1, 1, c_total, n, 1.0 / n as f32),
            false,
        );
        self.coder = Some(CoderIds { ctx, hist });
    }

    pub fn has_coder(&self) -> bool {
        self.coder.is_some()
    }

    /// Marks every autoencoder parameter non-trainable; stage-2 training
    /// then only moves the context models.
    pub fn freeze_autoencoder(&mut self) {
        let coder_prefix = "ctx";
        let hist_name = "coder.histogram";
        let names: Vec<String> = self.store.iter().map(|e| e.name.clone()).collect();
        for (i, name) in names.iter().enumerate() {
            if !name.starts_with(coder_prefix) && name != hist_name {
                self.store.set_trainable(ParamId(i), false);
            }
        }
    }

    pub fn histogram(&self) -> Result<BaseHistogram> {
        let coder = self.coder.as_ref().ok_or_else(|| Error::config("model has no coder stage"))?;
        Ok(BaseHistogram {
            n_levels: self.config.n_levels,
            probs: self.store.value(coder.hist).data.clone(),
        })
    }

    pub fn set_histogram(&mut self, hist: &BaseHistogram) -> Result<()> {
        let coder = self.coder.as_ref().ok_or_else(|| Error::config("model has no coder stage"))?;
        let t = self.store.value_mut(coder.hist);
        if t.data.len() != hist.probs.len() {
            return Err(Error::config("histogram shape mismatch"));
        }
        t.data.copy_from_slice(&hist.probs);
        Ok(())
    }

    /// Serializes config header + parameter blob.
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let channels: Vec<String> = c.channels.iter().map(|v| v.to_string()).collect();
        let mut head = String::new();
        head.push_str("msic_checkpoint=1\n");
        head.push_str(&format!("m={}\n", c.m));
        head.push_str(&format!("channels={}\n", channels.join(",")));
        head.push_str(&format!("n_levels={}\n", c.n_levels));
        head.push_str(&format!("u={}\n", c.u));
        head.push_str(&format!("hidden_width={}\n", c.hidden_width));
        head.push_str(&format!("depth={}\n", c.depth));
        head.push_str(&format!("k_blocks={}\n", c.k_blocks));
        head.push_str(&format!("ctx_hidden={}\n", c.ctx_hidden));
        head.push_str(&format!("has_coder={}\n", if self.has_coder() { 1 } else { 0 }));
        head.push('\n');
        let mut out = head.into_bytes();
        out.extend_from_slice(&write_blob(&self.store));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let sep = find_blank_line(bytes)
            .ok_or_else(|| Error::format("checkpoint missing blank-line separator"))?;
        let head = std::str::from_utf8(&bytes[..sep + 1])
            .map_err(|_| Error::format("checkpoint header is not ASCII"))?;
        let kv = parse_kv(head)?;
        let get = |k: &str| {
            kv.iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::format(format!("checkpoint header missing key '{k}'")))
        };
        if get("msic_checkpoint")? != "1" {
            return Err(Error::format("unsupported checkpoint version"));
        }
        let config = CodecConfig {
            m: parse_num(get("m")?)?,
            channels: get("channels")?
                .split(',')
                .map(parse_num)
                .collect::<Result<_>>()?,
            n_levels: parse_num(get("n_levels")?)? as u8,
            u: get("u")?
                .parse::<f64>()
                .map_err(|_| Error::format("bad value for u"))?,
            hidden_width: parse_num(get("hidden_width")?)?,
            depth: parse_num(get("depth")?)?,
            k_blocks: parse_num(get("k_blocks")?)?,
            ctx_hidden: parse_num(get("ctx_hidden")?)?,
        };
        let has_coder = get("has_coder")? == "1";
        let mut model = CodecModel::new(config, 0)?;
        if has_coder {
            model.add_coder(0);
        }
        load_blob(&mut model.store, &bytes[sep + 2..])?;
        Ok(model)
    }

    /// FNV-1a 64 over the serialized checkpoint; embedded in containers so
    /// a stream is never decoded with the wrong model.
    pub fn digest(&self) -> u64 {
        fnv1a64(&self.to_bytes())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

fn find_blank_line(bytes: &[u8]) -> Option<usize> {
    bytes.windows(2).position(|w| w == b"\n\n")
}

fn parse_kv(head: &str) -> Result<Vec<(String, String)>> {
    head.lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| Error::format(format!("bad header line '{l}'")))?;
            Ok((k.to_string(), v.to_string()))
        })
        .collect()
}

fn parse_num(s: &str) -> Result<usize> {
    s.trim()
        .parse::<usize>()
        .map_err(|_| Error::format(format!("bad numeric value '{s}'")))
}

/// Parses a training config file in the same key=value format; unknown
/// keys are rejected.
pub fn parse_config_file(text: &str) -> Result<CodecConfig> {
    let kv = parse_kv(text)?;
    let mut cfg = CodecConfig {
        m: 4,
        channels: vec![1, 2, 4, 8],
        n_levels: 7,
        u: 4.0,
        hidden_width: 16,
        depth: 6,
        k_blocks: 4,
        ctx_hidden: 16,
    };
    for (k, v) in kv {
        match k.as_str() {
            "m" => cfg.m = parse_num(&v)?,
            "channels" => {
                cfg.channels = v.split(',').map(parse_num).collect::<Result<_>>()?
            }
            "n_levels" => cfg.n_levels = parse_num(&v)? as u8,
            "u" => cfg.u = v.parse().map_err(|_| Error::format("bad value for u"))?,
            "hidden_width" => cfg.hidden_width = parse_num(&v)?,
            "depth" => cfg.depth = parse_num(&v)?,
            "k_blocks" => cfg.k_blocks = parse_num(&v)?,
            "ctx_hidden" => cfg.ctx_hidden = parse_num(&v)?,
            other => return Err(Error::format(format!("unknown config key '{other}'"))),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}
