mod common;

use common::props::{auth_vectors, bit_flip_successes, fixed_claims, FIXED_SECRET, FIXED_TOKEN};
use common::reference_hmac_sha256;
use proptest::prelude::*;
use skyway::auth::{decode_verified, hmac_sha256};

#[test]
fn hmac_matches_published_vectors_and_fixed_token() {
    assert_eq!(auth_vectors(), Ok(7));
}

#[test]
fn fixed_token_verifies_to_its_claims() {
    assert_eq!(decode_verified(FIXED_SECRET, FIXED_TOKEN), Ok(fixed_claims()));
    assert!(decode_verified(b"another-key", FIXED_TOKEN).is_err());
}

#[test]
fn ten_thousand_bit_flips_never_verify() {
    assert_eq!(bit_flip_successes(10_000, 7), 0);
}

proptest! {
    #[test]
    fn library_hmac_equals_reference(key in prop::collection::vec(any::<u8>(), 0..200), msg in prop::collection::vec(any::<u8>(), 0..300)) {
        prop_assert_eq!(hmac_sha256(&key, &msg), reference_hmac_sha256(&key, &msg));
    }
}
