//! 16-bit PCM mono WAV I/O.

use std::io::{Cursor, Read, Seek, Write};
use std::path::Path;

use crate::error::WavError;
use crate::signal::AudioBuffer;

const FULL_SCALE: f64 = 32768.0;

fn spec(sample_rate: u32) -> hound::WavSpec {
    hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    }
}

fn quantize(s: f64) -> i16 {
    (s * FULL_SCALE).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioBuffer, WavError> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(WavError::NotFound(path.to_path_buf()));
    }
    let reader = hound::WavReader::open(path).map_err(|e| classify(path, e))?;
    decode(reader, path)
}

pub fn read_wav_bytes(bytes: &[u8]) -> Result<AudioBuffer, WavError> {
    let path = Path::new("<memory>");
    let reader = hound::WavReader::new(Cursor::new(bytes)).map_err(|e| classify(path, e))?;
    decode(reader, path)
}

fn decode<R: Read>(reader: hound::WavReader<R>, path: &Path) -> Result<AudioBuffer, WavError> {
    let s = reader.spec();
    let unsupported = |reason: String| WavError::UnsupportedFormat { path: path.to_path_buf(), reason };
    if s.channels != 1 {
        return Err(unsupported(format!("{} channels, only mono is supported", s.channels)));
    }
    if s.sample_format != hound::SampleFormat::Int || s.bits_per_sample != 16 {
        return Err(unsupported(format!(
            "{}-bit {:?}, only 16-bit PCM is supported",
            s.bits_per_sample, s.sample_format
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|r| r.map(|v| v as f64 / FULL_SCALE))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| classify(path, e))?;
    Ok(AudioBuffer { samples, sample_rate: s.sample_rate })
}

fn classify(path: &Path, e: hound::Error) -> WavError {
    match e {
        hound::Error::Unsupported | hound::Error::FormatError(_) => WavError::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: e.to_string(),
        },
        other => WavError::Io { path: path.to_path_buf(), source: other },
    }
}

pub fn write_wav(path: impl AsRef<Path>, audio: &AudioBuffer) -> Result<(), WavError> {
    let path = path.as_ref();
    let writer = hound::WavWriter::create(path, spec(audio.sample_rate))
        .map_err(|e| WavError::Io { path: path.to_path_buf(), source: e })?;
    encode(writer, audio, path)
}

pub fn wav_bytes(audio: &AudioBuffer) -> Vec<u8> {
    let mut cursor = Cursor::new(Vec::new());
    {
        let writer = hound::WavWriter::new(&mut cursor, spec(audio.sample_rate)).expect("in-memory writer");
        encode(writer, audio, Path::new("<memory>")).expect("in-memory write");
    }
    cursor.into_inner()
}

fn encode<W: Write + Seek>(mut writer: hound::WavWriter<W>, audio: &AudioBuffer, path: &Path) -> Result<(), WavError> {
    let io = |e| WavError::Io { path: path.to_path_buf(), source: e };
    for &s in &audio.samples {
        writer.write_sample(quantize(s)).map_err(io)?;
    }
    writer.finalize().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..1000).map(|_| rng.gen_range(-0.99..0.99)).collect();
        let audio = AudioBuffer::new(x, 24_000).unwrap();
        write_wav(&path, &audio).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate, 24_000);
        let max = back.samples.iter().zip(&audio.samples).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(max <= 2f64.powi(-15), "{max}");

        let mem = read_wav_bytes(&wav_bytes(&audio)).unwrap();
        assert_eq!(mem, back);
    }

    #[test]
    fn missing_file() {
        assert!(matches!(read_wav("/no/such/file.wav"), Err(WavError::NotFound(_))));
    }

    #[test]
    fn stereo_and_8bit_are_unsupported() {
        let dir = tempfile::tempdir().unwrap();
        let stereo = dir.path().join("stereo.wav");
        let mut w = hound::WavWriter::create(
            &stereo,
            hound::WavSpec { channels: 2, sample_rate: 24_000, bits_per_sample: 16, sample_format: hound::SampleFormat::Int },
        )
        .unwrap();
        for _ in 0..20 {
            w.write_sample(0i16).unwrap();
        }
        w.finalize().unwrap();
        assert!(matches!(read_wav(&stereo), Err(WavError::UnsupportedFormat { .. })));

        let eight = dir.path().join("eight.wav");
        let mut w = hound::WavWriter::create(
            &eight,
            hound::WavSpec { channels: 1, sample_rate: 24_000, bits_per_sample: 8, sample_format: hound::SampleFormat::Int },
        )
        .unwrap();
        for _ in 0..20 {
            w.write_sample(0i8).unwrap();
        }
        w.finalize().unwrap();
        assert!(matches!(read_wav(&eight), Err(WavError::UnsupportedFormat { .. })));
    }
}
