//! Versioned plain-text checkpoints. Values are printed with Rust's
//! shortest-round-trip float formatting, so a save/load cycle restores every
//! parameter bit-exactly.

use std::path::Path;

use super::{EncoderStack, NnError, StackConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MAGIC: &str = "clsstack v1";

pub fn save_stack(stack: &EncoderStack, path: &Path) -> std::io::Result<()> {
    let mut snapshot = stack.clone();
    let mut out = String::new();
    out.push_str(MAGIC);
    out.push('\n');
    out.push_str("cfg ");
    out.push_str(&serde_json::to_string(&stack.cfg).expect("config serializes"));
    out.push('\n');
    for (name, tensor) in snapshot.tensors_mut() {
        out.push_str(&format!("tensor {} {}\n", name, tensor.len()));
        let rendered: Vec<String> = tensor.iter().map(|v| v.to_string()).collect();
        out.push_str(&rendered.join(" "));
        out.push('\n');
    }
    std::fs::write(path, out)
}

pub fn load_stack(path: &Path) -> Result<EncoderStack, NnError> {
    let bad = |msg: &str| NnError::BadCheckpoint(msg.to_string());
    let text = std::fs::read_to_string(path).map_err(|e| bad(&e.to_string()))?;
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(bad("missing magic header"));
    }
    let cfg_line = lines.next().ok_or_else(|| bad("missing config line"))?;
    let cfg_json = cfg_line
        .strip_prefix("cfg ")
        .ok_or_else(|| bad("missing config prefix"))?;
    let cfg: StackConfig =
        serde_json::from_str(cfg_json).map_err(|e| bad(&format!("bad config: {e}")))?;
    let mut stack = EncoderStack::new(cfg, &mut ChaCha8Rng::seed_from_u64(0));
    for (name, tensor) in stack.tensors_mut() {
        let header = lines.next().ok_or_else(|| bad("missing tensor header"))?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some("tensor") {
            return Err(bad("expected tensor header"));
        }
        let got_name = parts.next().ok_or_else(|| bad("missing tensor name"))?;
        if got_name != name {
            return Err(bad(&format!("expected tensor `{name}`, found `{got_name}`")));
        }
        let len: usize = parts
            .next()
            .and_then(|l| l.parse().ok())
            .ok_or_else(|| bad("bad tensor length"))?;
        if len != tensor.len() {
            return Err(bad(&format!(
                "tensor `{name}` has length {len}, expected {}",
                tensor.len()
            )));
        }
        let values: Vec<&str> = lines
            .next()
            .ok_or_else(|| bad("missing tensor values"))?
            .split_whitespace()
            .collect();
        if values.len() != tensor.len() {
            return Err(bad(&format!("tensor `{name}` has wrong value count")));
        }
        for (slot, value) in tensor.iter_mut().zip(values) {
            *slot = value
                .parse()
                .map_err(|_| bad(&format!("bad value in `{name}`")))?;
        }
    }
    Ok(stack)
}
