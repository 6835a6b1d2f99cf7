//! Decoders map layer-`l` features to layer `l - 1` (or to an image).
//!
//! The built-in test decoder is a fixed bilinear upsample plus channel-pair
//! averaging, so pipelines can run without any trained model. External
//! decoders are shell command templates exchanging NPY files.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::npy::{load_tensor, save_tensor};
use crate::optimizer::DecoderBinding;
use crate::tensor::FeatureMap;

pub trait Decoder {
    fn decode(&self, features: &FeatureMap, from: u8, to: u8) -> Result<FeatureMap>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct BuiltinTestDecoder;

impl Decoder for BuiltinTestDecoder {
    fn decode(&self, features: &FeatureMap, _from: u8, _to: u8) -> Result<FeatureMap> {
        builtin_test_decode(features)
    }
}

/// Half-pixel bilinear sampling positions for a x2 upsample of an axis of
/// length `n`: `(low, high, weight_of_high)` per output index.
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// `(c, h, w) -> (c / 2, 2h, 2w)`: bilinear x2 upsample, then channel `k` of
/// the output is the mean of input channels `2k` and `2k + 1`.
pub fn builtin_test_decode(features: &FeatureMap) -> Result<FeatureMap> {
    let (c, h, w) = features.shape();
    if c % 2 != 0 {
        return Err(Error::Shape(format!(
            "builtin test decoder needs an even channel count, got {c}"
        )));
    }
    let rows = upsample_taps(h);
    let cols = upsample_taps(w);
    let sample = |ch: usize, oy: usize, ox: usize| -> f64 {
        let (y0, y1, fy) = rows[oy];
        let (x0, x1, fx) = cols[ox];
        let v = |y, x| f64::from(features.get(ch, y, x));
        let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
        let bottom = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    };
    FeatureMap::from_fn(c / 2, 2 * h, 2 * w, |k, y, x| {
        ((sample(2 * k, y, x) + sample(2 * k + 1, y, x)) / 2.0) as f32
    })
}

/// Runs a command template with `{in}`, `{out}`, `{from}` and `{to}`
/// substituted. Exit status 0 means success; anything else is a failure
/// reported with the command's stderr.
#[derive(Clone, Debug)]
pub struct ExternalDecoder {
    pub command_template: String,
    pub timeout: Duration,
    pub work_dir: PathBuf,
}

impl ExternalDecoder {
    pub fn new(command_template: impl Into<String>, timeout: Duration, work_dir: impl Into<PathBuf>) -> Self {
        ExternalDecoder {
            command_template: command_template.into(),
            timeout,
            work_dir: work_dir.into(),
        }
    }

    pub fn render(&self, input: &Path, output: &Path, from: u8, to: u8) -> String {
        self.command_template
            .replace("{in}", &input.display().to_string())
            .replace("{out}", &output.display().to_string())
            .replace("{from}", &from.to_string())
            .replace("{to}", &to.to_string())
    }

    fn run(&self, input: &Path, output: &Path, from: u8, to: u8) -> Result<()> {
        let command = self.render(input, output, from, to);
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&command)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Decoder(format!("cannot start `{command}`: {e}")))?;
        let mut stderr = child.stderr.take().expect("stderr is piped");
        let reader = thread::spawn(move || {
            let mut text = String::new();
            let _ = stderr.read_to_string(&mut text);
            text
        });

        let deadline = Instant::now() + self.timeout;
        let status = loop {
            match child.try_wait() {
                Ok(Some(status)) => break status,
                Ok(None) if Instant::now() >= deadline => {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(Error::Decoder(format!(
                        "`{command}` timed out after {:?}",
                        self.timeout
                    )));
                }
                Ok(None) => thread::sleep(Duration::from_millis(10)),
                Err(e) => return Err(Error::Decoder(format!("waiting on `{command}`: {e}"))),
            }
        };
        let diagnostics = reader.join().unwrap_or_default();
        if !status.success() {
            return Err(Error::Decoder(format!(
                "`{command}` exited with {status}: {}",
                diagnostics.trim()
            )));
        }
        if !output.exists() {
            return Err(Error::Decoder(format!(
                "`{command}` succeeded but wrote no {}",
                output.display()
            )));
        }
        Ok(())
    }

    /// Decodes layer `from` features to an image written at `png`.
    pub fn decode_to_image(&self, features: &FeatureMap, from: u8, png: &Path) -> Result<()> {
        let input = self.work_dir.join(format!("decode_in_l{from}_to_image.npy"));
        save_tensor(features, &input)?;
        self.run(&input, png, from, 0)
    }
}

impl Decoder for ExternalDecoder {
    fn decode(&self, features: &FeatureMap, from: u8, to: u8) -> Result<FeatureMap> {
        let input = self.work_dir.join(format!("decode_in_l{from}.npy"));
        let output = self.work_dir.join(format!("decode_out_l{to}.npy"));
        save_tensor(features, &input)?;
        if output.exists() {
            std::fs::remove_file(&output).map_err(|e| Error::io(&output, e))?;
        }
        self.run(&input, &output, from, to)?;
        load_tensor(&output)
    }
}

/// Instantiates the decoder named by a binding. External decoders exchange
/// files inside `work_dir`.
pub fn from_binding(binding: &DecoderBinding, work_dir: &Path) -> Box<dyn Decoder> {
    match binding {
        DecoderBinding::BuiltinTest => Box::new(BuiltinTestDecoder),
        DecoderBinding::ExternalCommand {
            command_template,
            timeout_secs,
        } => Box::new(ExternalDecoder::new(
            command_template.clone(),
            Duration::from_secs(*timeout_secs),
            work_dir,
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{random_map, rng};

    #[test]
    fn constant_map_stays_constant() {
        let m = FeatureMap::from_fn(4, 3, 2, |_, _, _| 2.5).unwrap();
        let out = builtin_test_decode(&m).unwrap();
        assert_eq!(out.shape(), (2, 6, 4));
        assert!(out.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn shape_rule() {
        let out = builtin_test_decode(&FeatureMap::zeros(4, 2, 2).unwrap()).unwrap();
        assert_eq!(out.shape(), (2, 4, 4));
        assert!(matches!(
            builtin_test_decode(&FeatureMap::zeros(3, 2, 2).unwrap()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn matches_quarter_weight_oracle() {
        // For a x2 half-pixel upsample, output 2k samples 3/4 of k and 1/4 of
        // k - 1, output 2k + 1 samples 3/4 of k and 1/4 of k + 1 (clamped).
        let m = random_map(&mut rng(9), 6, 3, 4);
        let out = builtin_test_decode(&m).unwrap();
        let taps = |o: usize, n: usize| -> [(usize, f64); 2] {
            let k = o / 2;
            let other = if o % 2 == 0 { k.saturating_sub(1) } else { (k + 1).min(n - 1) };
            [(k, 0.75), (other, 0.25)]
        };
        for k in 0..3 {
            for y in 0..6 {
                for x in 0..8 {
                    let mut expect = 0.0;
                    for ch in [2 * k, 2 * k + 1] {
                        for (sy, wy) in taps(y, 3) {
                            for (sx, wx) in taps(x, 4) {
                                expect += 0.5 * wy * wx * f64::from(m.get(ch, sy, sx));
                            }
                        }
                    }
                    let got = f64::from(out.get(k, y, x));
                    assert!((got - expect).abs() <= 1e-6, "({k},{y},{x}): {got} vs {expect}");
                }
            }
        }
    }

    #[test]
    fn external_decoder_round_trip_and_failure() {
        let dir = tempfile::tempdir().unwrap();
        let ok = ExternalDecoder::new("cp {in} {out}", Duration::from_secs(10), dir.path());
        let m = random_map(&mut rng(1), 2, 2, 2);
        assert_eq!(ok.decode(&m, 3, 2).unwrap(), m);
        assert_eq!(
            ok.render(Path::new("a.npy"), Path::new("b.npy"), 4, 3),
            "cp a.npy b.npy"
        );

        let bad = ExternalDecoder::new("echo boom >&2; exit 4", Duration::from_secs(10), dir.path());
        match bad.decode(&m, 3, 2) {
            Err(Error::Decoder(msg)) => assert!(msg.contains("boom"), "{msg}"),
            other => panic!("expected decoder error, got {other:?}"),
        }

        let slow = ExternalDecoder::new("sleep 5", Duration::from_millis(100), dir.path());
        assert!(matches!(slow.decode(&m, 3, 2), Err(Error::Decoder(_))));
    }
}
