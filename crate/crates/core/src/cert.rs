//! X.509 encoding of proof-of-authentication certificates.
//!
//! Leaf certificates carry an empty subject, a critical SAN with the mapped
//! identity, and four private extensions:
//!
//! | OID      | content                                       |
//! |----------|-----------------------------------------------|
//! | 1.3.9901 | OCTET STRING: JWT `header.payload` bytes      |
//! | 1.3.9902 | OCTET STRING: GQ proof wire bytes             |
//! | 1.3.9903 | UTF8String: token issuer URL                  |
//! | 1.3.9904 | OCTET STRING: SCT (see [`Sct::to_bytes`])     |
//!
//! The precertificate is the TBS with the SCT extension absent.

use std::str::FromStr;
use std::time::Duration;

use der::asn1::{BitString, GeneralizedTime, Ia5String, ObjectIdentifier, OctetString, UtcTime, Utf8StringRef};
use der::{Decode, DecodePem, Encode, EncodePem};
use p256::pkcs8::LineEnding;
use x509_cert::ext::pkix::name::GeneralName;
use x509_cert::ext::pkix::{BasicConstraints, KeyUsage, KeyUsages, SubjectAltName};
use x509_cert::ext::Extension;
use x509_cert::name::Name;
use x509_cert::serial_number::SerialNumber;
use x509_cert::spki::{AlgorithmIdentifierOwned, SubjectPublicKeyInfoOwned};
use x509_cert::time::{Time, Validity};
use x509_cert::{Certificate, TbsCertificate, Version};

use crate::ct::Sct;
use crate::keys::{SigningKey, VerifyingKey};

pub const ECDSA_WITH_SHA256: ObjectIdentifier = ObjectIdentifier::new_unwrap("1.2.840.10045.4.3.2");
pub const OID_SIGNING_INPUT: ObjectIdentifier = ObjectIdentifier::new_unwrap("1.3.9901");
pub const OID_GQ_PROOF: ObjectIdentifier = ObjectIdentifier::new_unwrap("1.3.9902");
pub const OID_ISSUER: ObjectIdentifier = ObjectIdentifier::new_unwrap("1.3.9903");
pub const OID_SCT: ObjectIdentifier = ObjectIdentifier::new_unwrap("1.3.9904");
const OID_SAN: ObjectIdentifier = ObjectIdentifier::new_unwrap("2.5.29.17");
const OID_KEY_USAGE: ObjectIdentifier = ObjectIdentifier::new_unwrap("2.5.29.15");
const OID_BASIC_CONSTRAINTS: ObjectIdentifier = ObjectIdentifier::new_unwrap("2.5.29.19");

pub const DEFAULT_CA_NAME: &str = "CN=poa-ca";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CertError {
    #[error("DER: {0}")]
    Der(String),
    #[error("PEM: {0}")]
    Pem(String),
    #[error("certificate is not canonical DER")]
    NonCanonical,
    #[error("missing extension {0}")]
    MissingExtension(ObjectIdentifier),
    #[error("duplicate extension {0}")]
    DuplicateExtension(ObjectIdentifier),
    #[error("unsupported certificate feature: {0}")]
    Unsupported(String),
}

impl From<der::Error> for CertError {
    fn from(e: der::Error) -> Self {
        CertError::Der(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum SanName {
    Email(String),
    Uri(String),
}

/// Certificate fields derived from the token claims.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SubjectFields {
    pub san: SanName,
    pub issuer: String,
    pub not_before: u64,
    pub not_after: u64,
}

/// Everything needed to build a leaf TBS.
#[derive(Debug, Clone)]
pub struct LeafTemplate<'a> {
    pub serial: &'a [u8],
    pub ca_name: &'a Name,
    pub fields: &'a SubjectFields,
    pub subject_key: &'a VerifyingKey,
    pub signing_input: &'a [u8],
    pub proof: &'a [u8],
}

fn time(secs: u64) -> Result<Time, CertError> {
    let d = Duration::from_secs(secs);
    // RFC 5280: UTCTime through 2049, GeneralizedTime after.
    Ok(match UtcTime::from_unix_duration(d) {
        Ok(t) if secs < 2_524_608_000 => Time::UtcTime(t),
        _ => Time::GeneralTime(GeneralizedTime::from_unix_duration(d)?),
    })
}

fn algorithm() -> AlgorithmIdentifierOwned {
    AlgorithmIdentifierOwned {
        oid: ECDSA_WITH_SHA256,
        parameters: None,
    }
}

fn octet_ext(oid: ObjectIdentifier, content: &[u8]) -> Result<Extension, CertError> {
    let inner = OctetString::new(content)?.to_der()?;
    Ok(Extension {
        extn_id: oid,
        critical: false,
        extn_value: OctetString::new(inner)?,
    })
}

pub fn san_general_name(san: &SanName) -> Result<GeneralName, CertError> {
    Ok(match san {
        SanName::Email(v) => GeneralName::Rfc822Name(Ia5String::new(v)?),
        SanName::Uri(v) => GeneralName::UniformResourceIdentifier(Ia5String::new(v)?),
    })
}

/// DER of the SAN extension value for `san`.
pub fn san_extension_value(san: &SanName) -> Result<Vec<u8>, CertError> {
    Ok(SubjectAltName(vec![san_general_name(san)?]).to_der()?)
}

pub fn ca_name(dn: &str) -> Result<Name, CertError> {
    Ok(Name::from_str(dn)?)
}

pub fn build_leaf_tbs(template: &LeafTemplate<'_>) -> Result<TbsCertificate, CertError> {
    let fields = template.fields;
    let extensions = vec![
        Extension {
            extn_id: OID_SAN,
            critical: true,
            extn_value: OctetString::new(san_extension_value(&fields.san)?)?,
        },
        Extension {
            extn_id: OID_KEY_USAGE,
            critical: true,
            extn_value: OctetString::new(KeyUsage(KeyUsages::DigitalSignature.into()).to_der()?)?,
        },
        octet_ext(OID_SIGNING_INPUT, template.signing_input)?,
        octet_ext(OID_GQ_PROOF, template.proof)?,
        Extension {
            extn_id: OID_ISSUER,
            critical: false,
            extn_value: OctetString::new(Utf8StringRef::new(&fields.issuer)?.to_der()?)?,
        },
    ];
    Ok(TbsCertificate {
        version: Version::V3,
        serial_number: SerialNumber::new(template.serial)?,
        signature: algorithm(),
        issuer: template.ca_name.clone(),
        validity: Validity {
            not_before: time(fields.not_before)?,
            not_after: time(fields.not_after)?,
        },
        subject: Name::default(),
        subject_public_key_info: SubjectPublicKeyInfoOwned::from_der(&template.subject_key.to_spki_der())?,
        issuer_unique_id: None,
        subject_unique_id: None,
        extensions: Some(extensions),
    })
}

/// Replaces the content of an OCTET STRING-wrapped private extension.
pub fn set_octet_extension(tbs: &mut TbsCertificate, oid: ObjectIdentifier, content: &[u8]) -> Result<(), CertError> {
    let ext = octet_ext(oid, content)?;
    let exts = tbs.extensions.get_or_insert_with(Vec::new);
    match exts.iter_mut().find(|e| e.extn_id == oid) {
        Some(slot) => *slot = ext,
        None => exts.push(ext),
    }
    Ok(())
}

/// Adds the SCT extension (replacing any existing one).
pub fn attach_sct(tbs: &mut TbsCertificate, sct: &Sct) -> Result<(), CertError> {
    set_octet_extension(tbs, OID_SCT, &sct.to_bytes())
}

/// DER of `tbs` with the SCT extension removed: what the CT log signs.
pub fn precert_tbs_der(tbs: &TbsCertificate) -> Result<Vec<u8>, CertError> {
    let mut pre = tbs.clone();
    if let Some(exts) = pre.extensions.as_mut() {
        exts.retain(|e| e.extn_id != OID_SCT);
    }
    Ok(pre.to_der()?)
}

pub fn sign_tbs(tbs: TbsCertificate, key: &SigningKey) -> Result<Certificate, CertError> {
    let signature = key.sign(&tbs.to_der()?);
    Ok(Certificate {
        tbs_certificate: tbs,
        signature_algorithm: algorithm(),
        signature: BitString::from_bytes(&signature)?,
    })
}

/// Self-signed CA root.
pub fn build_root(key: &SigningKey, dn: &str, not_before: u64, lifetime: u64) -> Result<Certificate, CertError> {
    let name = ca_name(dn)?;
    let mut serial = key.verifying_key().key_hash()[..16].to_vec();
    serial[0] &= 0x7f;
    let tbs = TbsCertificate {
        version: Version::V3,
        serial_number: SerialNumber::new(&serial)?,
        signature: algorithm(),
        issuer: name.clone(),
        validity: Validity {
            not_before: time(not_before)?,
            not_after: time(not_before + lifetime)?,
        },
        subject: name,
        subject_public_key_info: SubjectPublicKeyInfoOwned::from_der(&key.verifying_key().to_spki_der())?,
        issuer_unique_id: None,
        subject_unique_id: None,
        extensions: Some(vec![
            Extension {
                extn_id: OID_BASIC_CONSTRAINTS,
                critical: true,
                extn_value: OctetString::new(
                    BasicConstraints {
                        ca: true,
                        path_len_constraint: Some(0),
                    }
                    .to_der()?,
                )?,
            },
            Extension {
                extn_id: OID_KEY_USAGE,
                critical: true,
                extn_value: OctetString::new(KeyUsage(KeyUsages::KeyCertSign.into()).to_der()?)?,
            },
        ]),
    };
    sign_tbs(tbs, key)
}

pub fn to_pem(cert: &Certificate) -> String {
    cert.to_pem(LineEnding::LF).expect("certificate encodes")
}

pub fn from_pem(pem: &str) -> Result<Certificate, CertError> {
    Certificate::from_pem(pem.trim().as_bytes()).map_err(|e| CertError::Pem(e.to_string()))
}

/// Splits a PEM bundle into certificates.
pub fn chain_from_pem(bundle: &str) -> Result<Vec<Certificate>, CertError> {
    const END: &str = "-----END CERTIFICATE-----";
    let mut out = Vec::new();
    for block in bundle.split_inclusive(END) {
        if block.trim().is_empty() {
            continue;
        }
        out.push(from_pem(block)?);
    }
    if out.is_empty() {
        return Err(CertError::Pem("no certificate found".into()));
    }
    Ok(out)
}

/// Decodes DER and requires that it re-encodes to the same bytes.
pub fn parse_der(der: &[u8]) -> Result<Certificate, CertError> {
    let cert = Certificate::from_der(der)?;
    if cert.to_der()? != der {
        return Err(CertError::NonCanonical);
    }
    Ok(cert)
}

pub fn certificate_key(cert: &Certificate) -> Result<VerifyingKey, CertError> {
    let spki = cert.tbs_certificate.subject_public_key_info.to_der()?;
    VerifyingKey::from_spki_der(&spki).map_err(|e| CertError::Unsupported(e.to_string()))
}

/// Checks `cert`'s signature under `issuer_key`.
pub fn verify_signature(cert: &Certificate, issuer_key: &VerifyingKey) -> bool {
    if cert.signature_algorithm.oid != ECDSA_WITH_SHA256 || cert.tbs_certificate.signature.oid != ECDSA_WITH_SHA256 {
        return false;
    }
    let (Ok(tbs), Some(sig)) = (cert.tbs_certificate.to_der(), cert.signature.as_bytes()) else {
        return false;
    };
    issuer_key.verify(&tbs, sig)
}

fn unix(t: &Time) -> u64 {
    t.to_unix_duration().as_secs()
}

/// The custom content of a leaf certificate, extracted without judgement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeafContents {
    pub signing_input: Vec<u8>,
    pub proof: Vec<u8>,
    pub issuer: String,
    pub sct: Vec<u8>,
    /// DER of the SAN extension value.
    pub san: Vec<u8>,
    pub not_before: u64,
    pub not_after: u64,
    pub precert_tbs: Vec<u8>,
}

fn unique_ext<'a>(exts: &'a [Extension], oid: ObjectIdentifier) -> Result<&'a Extension, CertError> {
    let mut found = exts.iter().filter(|e| e.extn_id == oid);
    let first = found.next().ok_or(CertError::MissingExtension(oid))?;
    if found.next().is_some() {
        return Err(CertError::DuplicateExtension(oid));
    }
    Ok(first)
}

fn octet_content(ext: &Extension) -> Result<Vec<u8>, CertError> {
    Ok(OctetString::from_der(ext.extn_value.as_bytes())?.as_bytes().to_vec())
}

pub fn leaf_contents(cert: &Certificate) -> Result<LeafContents, CertError> {
    let tbs = &cert.tbs_certificate;
    let exts = tbs.extensions.as_deref().unwrap_or_default();
    let issuer_ext = unique_ext(exts, OID_ISSUER)?;
    let issuer = Utf8StringRef::from_der(issuer_ext.extn_value.as_bytes())?.as_str().to_owned();
    Ok(LeafContents {
        signing_input: octet_content(unique_ext(exts, OID_SIGNING_INPUT)?)?,
        proof: octet_content(unique_ext(exts, OID_GQ_PROOF)?)?,
        issuer,
        sct: octet_content(unique_ext(exts, OID_SCT)?)?,
        san: unique_ext(exts, OID_SAN)?.extn_value.as_bytes().to_vec(),
        not_before: unix(&tbs.validity.not_before),
        not_after: unix(&tbs.validity.not_after),
        precert_tbs: precert_tbs_der(tbs)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn keys() -> (SigningKey, SigningKey) {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        (SigningKey::generate(&mut rng), SigningKey::generate(&mut rng))
    }

    fn fields() -> SubjectFields {
        SubjectFields {
            san: SanName::Email("alice@example.com".into()),
            issuer: "https://idp.test".into(),
            not_before: 1_700_000_000,
            not_after: 1_700_000_600,
        }
    }

    fn leaf(subject: &SigningKey) -> TbsCertificate {
        let name = ca_name(DEFAULT_CA_NAME).unwrap();
        let f = fields();
        let vk = subject.verifying_key();
        build_leaf_tbs(&LeafTemplate {
            serial: &[0x01, 0x02],
            ca_name: &name,
            fields: &f,
            subject_key: &vk,
            signing_input: b"aGVhZGVy.Ym9keQ",
            proof: &[1, 2, 3],
        })
        .unwrap()
    }

    fn sct() -> Sct {
        Sct {
            log_id: [7; 32],
            timestamp_ms: 1_700_000_001_000,
            signature: vec![9; 70],
        }
    }

    #[test]
    fn leaf_round_trip() {
        let (ca, subject) = keys();
        let mut tbs = leaf(&subject);
        let pre = precert_tbs_der(&tbs).unwrap();
        assert_eq!(pre, tbs.to_der().unwrap());
        attach_sct(&mut tbs, &sct()).unwrap();
        let cert = sign_tbs(tbs, &ca).unwrap();
        let der = cert.to_der().unwrap();
        let parsed = parse_der(&der).unwrap();
        assert!(verify_signature(&parsed, &ca.verifying_key()));
        assert!(!verify_signature(&parsed, &subject.verifying_key()));
        assert_eq!(certificate_key(&parsed).unwrap(), subject.verifying_key());

        let c = leaf_contents(&parsed).unwrap();
        assert_eq!(c.signing_input, b"aGVhZGVy.Ym9keQ");
        assert_eq!(c.proof, vec![1, 2, 3]);
        assert_eq!(c.issuer, "https://idp.test");
        assert_eq!(Sct::from_bytes(&c.sct).unwrap(), sct());
        assert_eq!(c.san, san_extension_value(&fields().san).unwrap());
        assert_eq!((c.not_before, c.not_after), (1_700_000_000, 1_700_000_600));
        assert_eq!(c.precert_tbs, pre);

        let pem = to_pem(&parsed);
        assert_eq!(from_pem(&pem).unwrap(), parsed);
    }

    #[test]
    fn san_encodings() {
        // [1] IMPLICIT IA5String for rfc822Name, [6] for URI.
        let email = san_extension_value(&SanName::Email("a@b".into())).unwrap();
        assert_eq!(email, vec![0x30, 0x05, 0x81, 0x03, b'a', b'@', b'b']);
        let uri = san_extension_value(&SanName::Uri("x:y".into())).unwrap();
        assert_eq!(uri, vec![0x30, 0x05, 0x86, 0x03, b'x', b':', b'y']);
    }

    #[test]
    fn missing_sct_is_reported() {
        let (ca, subject) = keys();
        let cert = sign_tbs(leaf(&subject), &ca).unwrap();
        assert_eq!(leaf_contents(&cert), Err(CertError::MissingExtension(OID_SCT)));
    }

    #[test]
    fn root_is_self_signed() {
        let (ca, _) = keys();
        let root = build_root(&ca, DEFAULT_CA_NAME, 1_700_000_000, 86_400).unwrap();
        assert!(verify_signature(&root, &ca.verifying_key()));
        assert_eq!(root.tbs_certificate.subject, root.tbs_certificate.issuer);
        let bundle = format!("{}{}", to_pem(&root), to_pem(&root));
        assert_eq!(chain_from_pem(&bundle).unwrap().len(), 2);
        assert!(chain_from_pem("").is_err());
    }

    #[test]
    fn non_canonical_der_rejected() {
        let (ca, subject) = keys();
        let mut tbs = leaf(&subject);
        attach_sct(&mut tbs, &sct()).unwrap();
        let der = sign_tbs(tbs, &ca).unwrap().to_der().unwrap();
        // Re-encode the outer length in long form with a redundant byte.
        assert_eq!(der[1], 0x82);
        let mut long = vec![0x30, 0x83, 0x00];
        long.extend_from_slice(&der[2..]);
        assert!(parse_der(&long).is_err());
    }

    #[test]
    fn far_future_uses_generalized_time() {
        assert!(matches!(time(1_700_000_000).unwrap(), Time::UtcTime(_)));
        assert!(matches!(time(2_524_608_000).unwrap(), Time::GeneralTime(_)));
    }
}
