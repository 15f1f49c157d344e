use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use crate::error::{Error, Result};

use super::AudioClip;

const FORMAT_PCM: u16 = 1;
const FORMAT_IEEE_FLOAT: u16 = 3;

struct FmtChunk {
    format: u16,
    channels: u16,
    sample_rate: u32,
    bits_per_sample: u16,
}

/// Reads a RIFF/WAVE file holding 16-bit PCM or 32-bit IEEE float samples.
/// Multichannel audio is downmixed to mono by averaging the channels;
/// PCM values are normalized by 1/32768.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let mut reader = BufReader::new(File::open(path)?);

    let mut riff = [0u8; 12];
    reader.read_exact(&mut riff)?;
    if &riff[0..4] != b"RIFF" || &riff[8..12] != b"WAVE" {
        return Err(Error::AudioLoad(format!(
            "{}: not a RIFF/WAVE file",
            path.display()
        )));
    }

    let mut fmt: Option<FmtChunk> = None;
    let mut data: Option<Vec<u8>> = None;
    loop {
        let mut header = [0u8; 8];
        match reader.read_exact(&mut header) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let id = [header[0], header[1], header[2], header[3]];
        let size = u32::from_le_bytes([header[4], header[5], header[6], header[7]]) as usize;
        match &id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::AudioLoad(format!(
                        "{}: fmt chunk too short ({size} bytes)",
                        path.display()
                    )));
                }
                let mut buf = vec![0u8; size];
                reader.read_exact(&mut buf)?;
                fmt = Some(FmtChunk {
                    format: u16::from_le_bytes([buf[0], buf[1]]),
                    channels: u16::from_le_bytes([buf[2], buf[3]]),
                    sample_rate: u32::from_le_bytes([buf[4], buf[5], buf[6], buf[7]]),
                    bits_per_sample: u16::from_le_bytes([buf[14], buf[15]]),
                });
            }
            b"data" => {
                let mut buf = vec![0u8; size];
                reader.read_exact(&mut buf)?;
                data = Some(buf);
            }
            _ => {
                // skip unknown chunk
                let mut buf = vec![0u8; size];
                reader.read_exact(&mut buf)?;
            }
        }
        if size % 2 == 1 {
            let mut pad = [0u8; 1];
            let _ = reader.read_exact(&mut pad);
        }
    }

    let fmt = fmt.ok_or_else(|| {
        Error::AudioLoad(format!("{}: missing fmt chunk", path.display()))
    })?;
    let data = data.ok_or_else(|| {
        Error::AudioLoad(format!("{}: missing data chunk", path.display()))
    })?;
    if fmt.channels == 0 || fmt.sample_rate == 0 {
        return Err(Error::AudioLoad(format!(
            "{}: invalid fmt chunk (channels {}, rate {})",
            path.display(),
            fmt.channels,
            fmt.sample_rate
        )));
    }

    let channels = fmt.channels as usize;
    let interleaved: Vec<f64> = match (fmt.format, fmt.bits_per_sample) {
        (FORMAT_PCM, 16) => data
            .chunks_exact(2)
            .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0)
            .collect(),
        (FORMAT_IEEE_FLOAT, 32) => data
            .chunks_exact(4)
            .map(|b| (f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).clamp(-1.0, 1.0))
            .collect(),
        (format, bits) => {
            return Err(Error::AudioLoad(format!(
                "{}: unsupported codec (format tag {format}, {bits} bits per sample, {} channels)",
                path.display(),
                fmt.channels
            )))
        }
    };

    let frames = interleaved.len() / channels;
    let samples = if channels == 1 {
        interleaved
    } else {
        (0..frames)
            .map(|f| {
                interleaved[f * channels..(f + 1) * channels]
                    .iter()
                    .sum::<f64>()
                    / channels as f64
            })
            .collect()
    };

    Ok(AudioClip {
        samples,
        sample_rate: fmt.sample_rate,
        source_path: path.display().to_string(),
    })
}

#[cfg(test)]
pub(crate) mod test_support {
    /// Serializes a minimal PCM16 WAV byte stream for tests.
    pub fn wav_pcm16(rate: u32, channels: u16, samples: &[i16]) -> Vec<u8> {
        let data_len = samples.len() * 2;
        let mut out = Vec::new();
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&(36 + data_len as u32).to_le_bytes());
        out.extend_from_slice(b"WAVE");
        out.extend_from_slice(b"fmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&1u16.to_le_bytes());
        out.extend_from_slice(&channels.to_le_bytes());
        out.extend_from_slice(&rate.to_le_bytes());
        out.extend_from_slice(&(rate * channels as u32 * 2).to_le_bytes());
        out.extend_from_slice(&(channels * 2).to_le_bytes());
        out.extend_from_slice(&16u16.to_le_bytes());
        out.extend_from_slice(b"data");
        out.extend_from_slice(&(data_len as u32).to_le_bytes());
        for s in samples {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out
    }

    pub fn wav_float32(rate: u32, channels: u16, samples: &[f32]) -> Vec<u8> {
        let data_len = samples.len() * 4;
        let mut out = Vec::new();
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&(36 + data_len as u32).to_le_bytes());
        out.extend_from_slice(b"WAVE");
        out.extend_from_slice(b"fmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&3u16.to_le_bytes());
        out.extend_from_slice(&channels.to_le_bytes());
        out.extend_from_slice(&rate.to_le_bytes());
        out.extend_from_slice(&(rate * channels as u32 * 4).to_le_bytes());
        out.extend_from_slice(&(channels * 4).to_le_bytes());
        out.extend_from_slice(&32u16.to_le_bytes());
        out.extend_from_slice(b"data");
        out.extend_from_slice(&(data_len as u32).to_le_bytes());
        for s in samples {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out
    }
}
