//! Browser bindings for a few upconv-core operations. Every export returns a
//! JSON string; failures are thrown as JavaScript exceptions carrying the
//! error message.

use serde_json::json;
use wasm_bindgen::prelude::*;

use upconv_core::calib::compute_sfdr;
use upconv_core::chains::{plan_frequencies, DoubleChainConfig};
use upconv_core::qutrit::{coherence_limit, TransmonParams};
use upconv_core::readout::voronoi_assignment;
use upconv_core::stand_in;

fn js_err(e: upconv_core::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn to_json(v: serde_json::Value) -> String {
    v.to_string()
}

/// Frequency plan of the double conversion chain for a target in GHz.
#[wasm_bindgen]
pub fn plan(target_ghz: f64) -> Result<String, JsValue> {
    let p = plan_frequencies(target_ghz * 1e9, &DoubleChainConfig::default()).map_err(js_err)?;
    Ok(to_json(json!({
        "target_ghz": p.target_hz * 1e-9,
        "f_if1_ghz": p.f_if1_hz * 1e-9,
        "f_lo2_ghz": p.f_lo2_hz * 1e-9,
        "image_ghz": p.image_hz * 1e-9,
        "if_sign_inverted": p.if_sign_inverted,
    })))
}

/// Runs a stand-in chain (`"iq"`, `"iq-uncal"` or `"double"`) and reports
/// labelled peaks, the SFDR and a decimated spectrum for plotting.
#[wasm_bindgen]
pub fn chain_spectrum(topology: &str, points: usize) -> Result<String, JsValue> {
    let chain = match topology {
        "iq" => stand_in::iq_chain(stand_in::iq_chain_config_calibrated()),
        "iq-uncal" => stand_in::iq_chain(stand_in::iq_chain_config_uncalibrated()),
        "double" => stand_in::double_chain(),
        other => return Err(JsValue::from_str(&format!("unknown topology {other:?}"))),
    };
    let run = chain.run().map_err(js_err)?;
    let sfdr = compute_sfdr(&run.spectrum, run.fundamental_hz, chain.peak_floor_dbc()).map_err(js_err)?;
    let (f, p) = (&run.spectrum.freq_hz, &run.spectrum.power_dbm);
    let step = (f.len() / points.max(16)).max(1);
    let (mut fs, mut ps) = (Vec::new(), Vec::new());
    for chunk in (0..f.len()).collect::<Vec<_>>().chunks(step) {
        let k = *chunk.iter().max_by(|&&a, &&b| p[a].total_cmp(&p[b])).unwrap();
        fs.push(f[k] * 1e-9);
        ps.push(p[k]);
    }
    Ok(to_json(json!({
        "fundamental_ghz": run.fundamental_hz * 1e-9,
        "sfdr": sfdr,
        "peaks": run.peaks,
        "freq_ghz": fs,
        "power_dbm": ps,
    })))
}

/// Optimal three-state assignment probabilities for Gaussian blobs of unit
/// variance separated by `d_ge`, `d_gf`, `d_ef`, together with the
/// decoherence limit of a gate of `gate_ns` on the stand-in transmon.
#[wasm_bindgen]
pub fn readout_and_coherence(d_ge: f64, d_gf: f64, d_ef: f64, gate_ns: f64) -> Result<String, JsValue> {
    let a = voronoi_assignment([d_ge, d_gf, d_ef]).map_err(js_err)?;
    let limit = coherence_limit(&TransmonParams::default(), gate_ns).map_err(js_err)?;
    Ok(to_json(json!({
        "assignment": { "g": a[0], "e": a[1], "f": a[2] },
        "average_error": 1.0 - (a[0] + a[1] + a[2]) / 3.0,
        "coherence_limit": limit,
    })))
}
