//! Checkpoint container.
//!
//! ```text
//! SVAE1\n
//! key=value\n          plain-text header (model config + free-form metadata)
//! ...
//! \n                   blank line ends the header
//! u32 LE               number of arrays
//! per array:
//!   u16 LE             name length, then UTF-8 name
//!   u8                 rank, then rank x u64 LE dims
//!   f64 LE x numel     values
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Result, SvaeError};
use crate::latent::VariantKind;
use crate::tensor::Tensor;

use super::config::{ConvSpec, ModelConfig, Projection};
use super::network::{Model, NamedParam};

pub const MAGIC: &str = "SVAE1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Extra header entries, in insertion order.
    pub meta: Vec<(String, String)>,
    pub arrays: Vec<NamedParam>,
}

fn specs_to_string(specs: &[ConvSpec]) -> String {
    specs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn parse_specs(s: &str) -> Option<Vec<ConvSpec>> {
    if s.is_empty() {
        return Some(vec![]);
    }
    s.split(',')
        .map(|item| {
            let v: Vec<usize> = item.split(':').map(|p| p.parse().ok()).collect::<Option<_>>()?;
            match v[..] {
                [c, k, st, p] => Some(ConvSpec::new(c, k, st, p)),
                _ => None,
            }
        })
        .collect()
}

fn parse_dims<const N: usize>(s: &str) -> Option<[usize; N]> {
    let v: Vec<usize> = s.split('x').map(|p| p.parse().ok()).collect::<Option<_>>()?;
    v.try_into().ok()
}

impl ModelConfig {
    pub fn to_header(&self) -> Vec<(String, String)> {
        let [c, h, w] = self.image_shape;
        let proj = self.decoder_projection.map_or_else(
            || "none".to_string(),
            |p| format!("{}x{}x{}", p.channels, p.height, p.width),
        );
        vec![
            ("variant".into(), self.variant.name().into()),
            ("d".into(), self.d.to_string()),
            ("n_maps".into(), self.n_maps.to_string()),
            ("latent_dim".into(), self.latent_dim.to_string()),
            ("image_shape".into(), format!("{c}x{h}x{w}")),
            ("likelihood_sigma".into(), self.likelihood_sigma.to_string()),
            ("encoder".into(), specs_to_string(&self.encoder)),
            ("decoder_projection".into(), proj),
            ("decoder".into(), specs_to_string(&self.decoder)),
        ]
    }

    pub fn from_header(entries: &[(String, String)]) -> Result<Self> {
        let get = |key: &str| -> Result<&str> {
            entries
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| SvaeError::format("checkpoint header", 0, format!("missing key {key:?}")))
        };
        let bad =
            |key: &str, v: &str| SvaeError::format("checkpoint header", 0, format!("bad value {v:?} for {key:?}"));
        let num = |key: &str| -> Result<usize> {
            let v = get(key)?;
            v.parse().map_err(|_| bad(key, v))
        };
        let variant: VariantKind = get("variant")?.parse()?;
        let sigma_s = get("likelihood_sigma")?;
        let image_s = get("image_shape")?;
        let proj_s = get("decoder_projection")?;
        let decoder_projection = if proj_s == "none" {
            None
        } else {
            let [channels, height, width] = parse_dims::<3>(proj_s).ok_or_else(|| bad("decoder_projection", proj_s))?;
            Some(Projection {
                channels,
                height,
                width,
            })
        };
        let enc_s = get("encoder")?;
        let dec_s = get("decoder")?;
        let cfg = ModelConfig {
            variant,
            d: num("d")?,
            n_maps: num("n_maps")?,
            latent_dim: num("latent_dim")?,
            image_shape: parse_dims::<3>(image_s).ok_or_else(|| bad("image_shape", image_s))?,
            likelihood_sigma: sigma_s.parse().map_err(|_| bad("likelihood_sigma", sigma_s))?,
            encoder: parse_specs(enc_s).ok_or_else(|| bad("encoder", enc_s))?,
            decoder_projection,
            decoder: parse_specs(dec_s).ok_or_else(|| bad("decoder", dec_s))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    name: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(SvaeError::format(
                self.name,
                self.pos as u64,
                format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        Checkpoint {
            config: model.config().clone(),
            meta: vec![],
            arrays: model
                .params()
                .iter()
                .map(|p| NamedParam {
                    name: p.name.clone(),
                    tensor: Tensor::new(p.tensor.shape(), p.tensor.data().to_vec()).expect("valid"),
                })
                .collect(),
        }
    }

    /// Rebuilds the model from the arrays whose names match its parameters.
    pub fn to_model(&self) -> Result<Model> {
        let template = Model::new(self.config.clone(), 0)?;
        let params = template
            .params()
            .iter()
            .map(|p| {
                self.array(&p.name)
                    .cloned()
                    .map(|tensor| NamedParam {
                        name: p.name.clone(),
                        tensor,
                    })
                    .ok_or_else(|| SvaeError::format("checkpoint", 0, format!("missing parameter {}", p.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        Model::from_params(self.config.clone(), params)
    }

    pub fn array(&self, name: &str) -> Option<&Tensor> {
        self.arrays.iter().find(|a| a.name == name).map(|a| &a.tensor)
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC.as_bytes());
        out.push(b'\n');
        for (k, v) in self.config.to_header().iter().chain(&self.meta) {
            out.extend_from_slice(format!("{k}={v}\n").as_bytes());
        }
        out.push(b'\n');
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            out.extend_from_slice(&(a.name.len() as u16).to_le_bytes());
            out.extend_from_slice(a.name.as_bytes());
            out.push(a.tensor.ndim() as u8);
            for &dim in a.tensor.shape() {
                out.extend_from_slice(&(dim as u64).to_le_bytes());
            }
            for &v in a.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], source_name: &str) -> Result<Self> {
        let magic = format!("{MAGIC}\n");
        if !bytes.starts_with(magic.as_bytes()) {
            return Err(SvaeError::format(source_name, 0, format!("missing {MAGIC} magic")));
        }
        let mut pos = magic.len();
        let mut header = Vec::new();
        loop {
            let end = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| SvaeError::format(source_name, pos as u64, "unterminated header"))?;
            let line = std::str::from_utf8(&bytes[pos..pos + end])
                .map_err(|_| SvaeError::format(source_name, pos as u64, "header is not UTF-8"))?;
            let line_start = pos;
            pos += end + 1;
            if line.is_empty() {
                break;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                SvaeError::format(
                    source_name,
                    line_start as u64,
                    format!("header line {line:?} lacks '='"),
                )
            })?;
            header.push((k.to_string(), v.to_string()));
        }
        let config = ModelConfig::from_header(&header)?;
        let config_keys: Vec<String> = config.to_header().into_iter().map(|(k, _)| k).collect();
        let meta = header.into_iter().filter(|(k, _)| !config_keys.contains(k)).collect();

        let mut r = Reader {
            bytes,
            pos,
            name: source_name,
        };
        let count = r.u32()?;
        let mut arrays = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| SvaeError::format(source_name, at as u64, "array name is not UTF-8"))?
                .to_string();
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(
                numel
                    .checked_mul(8)
                    .ok_or_else(|| SvaeError::format(source_name, r.pos as u64, "array too large"))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            arrays.push(NamedParam {
                name,
                tensor: Tensor::new(&shape, data)?,
            });
        }
        if r.pos != bytes.len() {
            return Err(SvaeError::format(
                source_name,
                r.pos as u64,
                "trailing bytes after last array",
            ));
        }
        Ok(Checkpoint { config, meta, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| SvaeError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| SvaeError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| SvaeError::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}
