//! Encode/decode round-trip over a large randomized message population.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use simrig_core::oracle::random_message;
use simrig_core::protocol::{decode_message, encode_message, Decoded};

#[test]
fn round_trip_on_100k_random_messages() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..100_000 {
        let msg = random_message(&mut rng);
        let bytes = encode_message(&msg).unwrap();
        match decode_message(&bytes).unwrap() {
            Decoded::Complete { message, consumed } => {
                assert_eq!(message, msg, "iteration {i}");
                assert_eq!(consumed, bytes.len(), "iteration {i}");
            }
            Decoded::Incomplete => panic!("complete frame decoded as incomplete at {i}"),
        }
    }
}

#[test]
fn streamed_concatenation_decodes_in_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let msgs: Vec<_> = (0..500).map(|_| random_message(&mut rng)).collect();
    let mut wire = Vec::new();
    for m in &msgs {
        wire.extend(encode_message(m).unwrap());
    }
    let mut offset = 0;
    for (i, expect) in msgs.iter().enumerate() {
        match decode_message(&wire[offset..]).unwrap() {
            Decoded::Complete { message, consumed } => {
                assert_eq!(&message, expect, "message {i}");
                offset += consumed;
            }
            Decoded::Incomplete => panic!("incomplete at message {i}"),
        }
    }
    assert_eq!(offset, wire.len());
}
