//! End-to-end scenarios over the in-process topology.

use std::sync::Arc;
use std::thread;

use poa_core::ca::{claim_map, pop_message, IssuanceRequest, IssueError};
use poa_core::cert::{self, SubjectFields};
use poa_core::ct::Sct;
use poa_core::games;
use poa_core::jose::{validate_claims, verify_with_jwks, ClaimRejection, ClaimsPolicy, UnsignedToken};
use poa_core::keys::SigningKey;
use poa_core::ledger::{Cosignature, JwkLedger};
use poa_core::service::{LedgerService, PoisonedClock};
use poa_core::sim::{Profile, Topology, TopologyConfig};
use poa_core::verifier::{self, Verdict, STEP_NAMES};

fn toy(seed: u64) -> Topology {
    Topology::new(TopologyConfig::new(Profile::TOY, seed)).unwrap()
}

#[test]
fn completeness_with_interleaved_rotations() {
    let topo = toy(1);
    let tally = games::completeness(&topo, 100, true).unwrap();
    assert_eq!((tally.successes, tally.trials), (100, 100));
    assert!(topo.idp.with_state(|s| s.rotation_counter()) > 0);
}

#[test]
fn zero_trials_is_vacuous() {
    let topo = toy(2);
    let tally = games::completeness(&topo, 0, false).unwrap();
    assert_eq!(tally.trials, 0);
}

#[test]
fn report_steps_are_ordered_and_short_circuit() {
    let topo = toy(3);
    let got = topo.request("steps@example.com").unwrap();
    let report = topo.verify(&got.issued.leaf_der());
    assert_eq!(report.verdict, Verdict::Accept);
    let steps: Vec<u8> = report.step_results.iter().map(|s| s.step).collect();
    assert_eq!(steps, vec![1, 2, 3, 4, 5, 6, 7]);
    for (s, name) in report.step_results.iter().zip(STEP_NAMES) {
        assert_eq!(s.name, name);
    }

    let zeroed = topo
        .reissue(&got.issued.leaf, |tbs| {
            let len = cert::leaf_contents(&got.issued.leaf).unwrap().proof.len();
            cert::set_octet_extension(tbs, cert::OID_GQ_PROOF, &vec![0; len]).unwrap();
        })
        .unwrap();
    let report = topo.verify(&zeroed);
    assert_eq!(report.verdict, Verdict::Reject);
    assert_eq!(report.step_results.len(), 6);
    assert_eq!(report.failed_step(), Some(6));
}

#[test]
fn issued_certificates_map_back_to_their_token() {
    let topo = toy(4);
    for sub in ["alice@example.com", "https://ci.example/job/42"] {
        let got = topo.request(sub).unwrap();
        let contents = cert::leaf_contents(&got.issued.leaf).unwrap();
        let unsigned = UnsignedToken::parse(&contents.signing_input).unwrap();
        let fields: SubjectFields = claim_map(&unsigned.claims, topo.trust.cert_lifetime).unwrap();
        assert_eq!(cert::san_extension_value(&fields.san).unwrap(), contents.san);
        assert_eq!(fields.issuer, contents.issuer);
        assert_eq!((fields.not_before, fields.not_after), (contents.not_before, contents.not_after));

        // The key set used at issuance was recorded no later than the SCT.
        let sct = Sct::from_bytes(&contents.sct).unwrap();
        let recorded = topo
            .ledger
            .entries()
            .into_iter()
            .filter(|e| e.jwks.find(unsigned.header.kid.as_deref().unwrap()).is_some())
            .map(|e| e.recorded_at)
            .min()
            .unwrap();
        assert!(recorded <= sct.timestamp_secs());
    }
}

#[test]
fn retired_key_token_is_refused() {
    let topo = toy(5);
    let before = topo.idp.with_state(|s| s.clone());
    topo.clock.advance(30);
    topo.rotate().unwrap();

    let key = SigningKey::generate(&mut *topo.rng());
    let now = topo.now();
    let nonce = topo.ca.challenge(&key.verifying_key(), now);
    let token = before
        .issue_token(&topo.token_request("late@example.com", Some(nonce.clone())), now)
        .unwrap();
    let err = topo
        .ca
        .issue(
            &IssuanceRequest {
                token: token.to_compact(),
                public_key: key.verifying_key(),
                pop: key.sign(&pop_message(&nonce)),
            },
            now,
        )
        .unwrap_err();
    assert_eq!(err.to_string(), "invalid-token(key-not-found)");
}

#[test]
fn compromised_ca_replay_is_limited_to_itself() {
    // A CA that keeps a fresh token can replay it to itself: accepted by
    // design. Any other relying party checks aud and refuses it.
    let topo = toy(6);
    let key = SigningKey::generate(&mut *topo.rng());
    let now = topo.now();
    let nonce = topo.ca.challenge(&key.verifying_key(), now);
    let token = topo
        .idp
        .token(&topo.token_request("victim@example.com", Some(nonce.clone())))
        .unwrap();

    let replay_key = SigningKey::generate(&mut *topo.rng());
    let replay_nonce = topo.ca.challenge(&replay_key.verifying_key(), now);
    // The nonce binds the token to the first challenge, so the CA can only
    // reuse it through that challenge, which it controls.
    let err = topo
        .ca
        .issue(
            &IssuanceRequest {
                token: token.to_compact(),
                public_key: replay_key.verifying_key(),
                pop: replay_key.sign(&pop_message(&replay_nonce)),
            },
            now,
        )
        .unwrap_err();
    assert_eq!(err, IssueError::UnknownChallenge);

    let jwks = topo.ca.cache().get(&topo.config.issuer).unwrap();
    assert!(verify_with_jwks(&jwks, &token).is_ok());
    let own = ClaimsPolicy::new(&topo.config.issuer, &topo.ca.config().ca_id);
    assert_eq!(validate_claims(&token.claims, &own, now), Ok(()));
    let other = ClaimsPolicy::new(&topo.config.issuer, "https://bank.example");
    assert_eq!(validate_claims(&token.claims, &other, now), Err(ClaimRejection::AudienceMismatch));
}

#[test]
fn concurrent_polls_append_once() {
    let topo = Arc::new(toy(7));
    let size = topo.ledger.size();
    topo.clock.advance(10);
    topo.idp.rotate().unwrap();
    let handles: Vec<_> = (0..8)
        .map(|_| {
            let topo = topo.clone();
            thread::spawn(move || topo.sync_jwks().unwrap())
        })
        .collect();
    let changed = handles.into_iter().map(|h| h.join().unwrap()).filter(|c| *c).count();
    assert!(changed >= 1);
    assert_eq!(topo.ledger.size(), size + 1);
}

#[test]
fn verification_reads_no_clock() {
    let topo = toy(8);
    let got = topo.request("clockless@example.com").unwrap();
    let der = got.issued.leaf_der();
    let live = verifier::verify(&der, &topo.trust, topo.ledger.as_ref(), None);
    assert!(live.accepted());

    // A snapshot of the ledger behind a clock that panics when read.
    let head = topo.ledger.digest();
    let mut snapshot = JwkLedger::from_entries(topo.ledger_signing_key().clone(), topo.ledger.entries(), head.timestamp);
    for (i, wk) in topo.witness_signing_keys().iter().enumerate() {
        let id = format!("witness-{i}");
        snapshot.register_witness(&id, wk.verifying_key());
        let signature = wk.sign(&snapshot.digest().message());
        snapshot.add_cosignature(Cosignature { witness_id: id, signature }).unwrap();
    }
    let poisoned = LedgerService::new(snapshot, Vec::new(), Arc::new(PoisonedClock));

    topo.clock.advance(10 * 365 * 86_400);
    let later = verifier::verify(&der, &topo.trust, &poisoned, None);
    assert!(later.accepted(), "{}", later.to_json());
    assert_eq!(later.to_json(), live.to_json());
}
