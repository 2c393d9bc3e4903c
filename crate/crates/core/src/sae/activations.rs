// SPDX-License-Identifier: MIT OR Apache-2.0

//! Capturing hook-site activations over a text corpus.

use std::path::Path;

use crate::error::{Error, Result};
use crate::lm::{encode_with_bos, HookSite, LmCheckpoint, Session};
use crate::numerics::Tensor;
use crate::tensorfile::{self, ByteWriter};

const MAGIC: &[u8; 4] = b"STAC";

/// Activations at one hook site, one row per text byte (the BOS position is
/// not included).
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationSet {
    pub site: HookSite,
    /// `[N x d_model]`.
    pub acts: Tensor,
}

/// Token ids fed to the model for `text`: BOS plus as many bytes as fit.
pub(crate) fn context_tokens(ckpt: &LmCheckpoint, text: &str) -> Vec<usize> {
    let mut tokens = encode_with_bos(text);
    tokens.truncate(ckpt.config.context_length);
    tokens
}

/// Per-text activations `[len x d_model]` at `site`, BOS row dropped.
pub(crate) fn text_activations(ckpt: &LmCheckpoint, site: HookSite, text: &str) -> Result<Tensor> {
    let tokens = context_tokens(ckpt, text);
    let mut s = Session::new(ckpt).with_capture(site)?;
    s.extend(&tokens)?;
    let all = s.take_captured();
    let d = ckpt.config.d_model;
    Tensor::new(vec![all.rows() - 1, d], all.data()[d..].to_vec())
}

pub fn capture_activations(
    ckpt: &LmCheckpoint,
    site: HookSite,
    texts: &[String],
) -> Result<ActivationSet> {
    site.check(&ckpt.config)?;
    let d = ckpt.config.d_model;
    let mut data = Vec::new();
    for text in texts {
        data.extend_from_slice(text_activations(ckpt, site, text)?.data());
    }
    if data.is_empty() {
        return Err(Error::contract("activation corpus has no text positions"));
    }
    Ok(ActivationSet {
        site,
        acts: Tensor::new(vec![data.len() / d, d], data)?,
    })
}

pub fn save_activations(set: &ActivationSet, path: &Path) -> Result<()> {
    let mut w = ByteWriter::new();
    w.u32(set.site.layer as u32);
    let bytes = tensorfile::encode(MAGIC, &w.into_inner(), &[("activations", &set.acts)]);
    tensorfile::write_file(path, &bytes)
}

pub fn load_activations(path: &Path) -> Result<ActivationSet> {
    let bytes = tensorfile::read_file(path)?;
    let mut file = tensorfile::decode(MAGIC, &bytes)?;
    let site = HookSite::new(file.config.u32("layer")? as usize);
    if !file.config.is_done() {
        return Err(file.config.fail("unexpected bytes in config block"));
    }
    let idx = file
        .tensors
        .iter()
        .position(|(n, t)| n == "activations" && t.rank() == 2)
        .ok_or_else(|| Error::Format {
            offset: 0,
            message: "missing 2-d tensor activations".into(),
        })?;
    let (_, acts) = file.tensors.swap_remove(idx);
    Ok(ActivationSet { site, acts })
}
