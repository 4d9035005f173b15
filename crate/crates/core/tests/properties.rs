//! Randomized invariant checks over the coding primitives.

use ndarray::Array3;
use proptest::prelude::*;

use odvc_core::bottleneck::{
    build_cdf_tables, decode_latent, dequantize, encode_latent, quantize_round, FactorizedPrior,
};
use odvc_core::container::{
    read_container, write_container, ContainerHeader, FrameRecord, FrameType,
};
use odvc_core::frames::{crop_to_original, validate_or_pad, DimensionPolicy};
use odvc_core::range_coder::{
    zigzag_decode, zigzag_encode, RangeDecoder, RangeEncoder, PROB_TOTAL,
};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Any symbol stream under any valid frequency split round-trips
    /// through the range coder.
    #[test]
    fn range_coder_round_trips(
        freqs in prop::collection::vec(1u32..500, 2..20),
        symbols in prop::collection::vec(any::<prop::sample::Index>(), 0..400),
    ) {
        let total: u32 = freqs.iter().sum();
        let mut cum = Vec::with_capacity(freqs.len() + 1);
        let mut acc = 0;
        for &f in &freqs {
            cum.push(acc);
            acc += f;
        }
        cum.push(total);
        let syms: Vec<usize> = symbols.iter().map(|i| i.index(freqs.len())).collect();

        let mut enc = RangeEncoder::new();
        for &s in &syms {
            enc.encode(cum[s], freqs[s], total);
        }
        let bytes = enc.finish();

        let mut dec = RangeDecoder::new(&bytes);
        for &expect in &syms {
            let f = dec.decode_freq(total);
            let s = cum.partition_point(|&c| c <= f) - 1;
            prop_assert_eq!(s, expect);
            dec.decode_update(cum[s], freqs[s]);
        }
    }

    #[test]
    fn zigzag_round_trips(v in any::<i32>()) {
        prop_assert_eq!(zigzag_decode(zigzag_encode(v)), v);
        // Small magnitudes map to small codes, keeping escapes cheap.
        if v.unsigned_abs() < 1 << 30 {
            prop_assert!(zigzag_encode(v) <= 2 * v.unsigned_abs() + 1);
        }
    }

    /// Quantization error is at most half a step, and dequantization is
    /// exact on integers.
    #[test]
    fn quantize_round_is_nearest(vals in prop::collection::vec(-1e6f32..1e6, 1..64)) {
        let n = vals.len();
        let x = Array3::from_shape_vec((1, 1, n), vals.clone()).unwrap();
        let q = quantize_round(x.view());
        let back: Array3<f32> = dequantize(&q);
        for (a, b) in vals.iter().zip(back.iter()) {
            prop_assert!((a - b).abs() <= 0.5 + 1e-3 * a.abs());
        }
        let q2 = quantize_round(back.view());
        prop_assert_eq!(q, q2);
    }

    /// CDF tables are strictly monotone, sum to the coder total, and
    /// cover every in-support symbol with nonzero mass.
    #[test]
    fn cdf_tables_are_valid(seed in 0u64..1000) {
        let prior = FactorizedPrior::<f32>::new(4, seed);
        let set = build_cdf_tables(&prior).unwrap();
        prop_assert_eq!(set.tables.len(), 4);
        for t in &set.tables {
            prop_assert_eq!(*t.cdf.first().unwrap(), 0);
            prop_assert_eq!(*t.cdf.last().unwrap(), PROB_TOTAL);
            for w in t.cdf.windows(2) {
                prop_assert!(w[0] < w[1], "every slot needs mass >= 1");
            }
        }
    }

    /// Latent coding round-trips across magnitudes that force both the
    /// in-support path and zigzag escapes.
    #[test]
    fn latent_coding_round_trips(
        seed in 0u64..1000,
        scale in 1f32..2000.0,
        h in 1usize..4,
        w in 1usize..4,
    ) {
        let prior = FactorizedPrior::<f32>::new(3, seed);
        let tables = build_cdf_tables(&prior).unwrap();
        let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f32 / (1u64 << 53) as f32 * 2.0 - 1.0
        };
        let q = Array3::from_shape_fn((3, h, w), |_| (next() * scale) as i32);
        let mut enc = RangeEncoder::new();
        encode_latent(&q, &tables, &mut enc);
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes);
        let out = decode_latent((3, h, w), &tables, &mut dec).unwrap();
        prop_assert_eq!(q, out);
    }

    /// Padding always yields multiple-of-16 sides, never shrinks, and
    /// cropping restores the original frame bit for bit.
    #[test]
    fn pad_then_crop_is_identity(
        w in 16usize..96,
        h in 16usize..96,
        seed in 0u64..1000,
    ) {
        let mut state = seed.wrapping_add(0xA5A5A5A5);
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 40) as f32 / (1u64 << 24) as f32
        };
        let frame = Array3::from_shape_fn((3, h, w), |_| next());
        let (padded, info) = validate_or_pad(&frame, DimensionPolicy::Pad).unwrap();
        let (_, ph, pw) = padded.dim();
        prop_assert_eq!(pw % 16, 0);
        prop_assert_eq!(ph % 16, 0);
        prop_assert!(pw >= w && ph >= h);
        prop_assert!(pw < w + 16 && ph < h + 16);
        let back = crop_to_original(&padded, &info);
        prop_assert_eq!(back.dim(), frame.dim());
        prop_assert!(back.iter().zip(frame.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));

        if w % 16 == 0 && h % 16 == 0 {
            let (same, info) = validate_or_pad(&frame, DimensionPolicy::Reject).unwrap();
            prop_assert_eq!(same.dim(), frame.dim());
            prop_assert!(!info.is_padded());
        } else {
            prop_assert!(validate_or_pad(&frame, DimensionPolicy::Reject).is_err());
        }
    }

    /// Containers round-trip arbitrary payloads and reject any single
    /// flipped payload byte.
    #[test]
    fn container_round_trips_and_detects_corruption(
        n_frames in 1usize..5,
        lens in prop::collection::vec(1usize..64, 5),
        lambda in 1f32..5000.0,
        flip in any::<prop::sample::Index>(),
    ) {
        let header = ContainerHeader {
            orig_width: 60,
            orig_height: 70,
            padded_width: 64,
            padded_height: 80,
            frame_count: n_frames as u32,
            gop: 4,
            metric: 0,
            lambda,
            topology_hash: [7u8; 32],
            iframe_codec_id: 0,
        };
        let records: Vec<FrameRecord> = (0..n_frames)
            .map(|i| FrameRecord {
                frame_type: if i == 0 { FrameType::Intra } else { FrameType::Predicted },
                payload: (0..lens[i]).map(|j| (i * 31 + j * 7) as u8).collect(),
            })
            .collect();
        let bytes = write_container(&header, &records).unwrap();
        let (h2, r2) = read_container(&bytes).unwrap();
        prop_assert_eq!(&h2, &header);
        prop_assert_eq!(r2.len(), records.len());
        for (a, b) in r2.iter().zip(&records) {
            prop_assert_eq!(a.frame_type, b.frame_type);
            prop_assert_eq!(&a.payload, &b.payload);
        }

        // Flip one byte anywhere: parsing must fail, or the damage must
        // land in a plain header field (lambda, hash) and be visible there.
        let mut bad = bytes.clone();
        let i = flip.index(bad.len());
        bad[i] ^= 0x01;
        let detected = match read_container(&bad) {
            Err(_) => true,
            Ok((h3, r3)) => {
                h3 != header
                    || r3.len() != records.len()
                    || r3
                        .iter()
                        .zip(&records)
                        .any(|(a, b)| a.frame_type != b.frame_type || a.payload != b.payload)
            }
        };
        prop_assert!(detected, "flipped byte {} went unnoticed", i);
    }
}
