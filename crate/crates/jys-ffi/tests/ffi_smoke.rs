//! Drive the C ABI surface from Rust the way a foreign binding would.

use std::ffi::CString;

use jys_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0i8; 512];
    unsafe { jys_last_error_message(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf.iter().take_while(|&&c| c != 0).map(|&c| c as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[test]
fn full_pipeline_through_the_c_abi() {
    unsafe {
        let kernel = jys_kernel_new(1, 9, 1e-3, 1.0, 1.0, 3);
        assert!(!kernel.is_null(), "{}", last_error());
        let data = jys_data_countdown(8, 8);
        assert!(!data.is_null(), "{}", last_error());
        let oracle = jys_oracle_new(kernel, data, 1e-6);
        assert!(!oracle.is_null(), "{}", last_error());
        assert_eq!(jys_oracle_num_dims(oracle), 8);

        let schedule = jys_schedule_optimize(oracle, 1, 1e-4, 128, 7, 0);
        assert!(!schedule.is_null(), "{}", last_error());
        let len = jys_schedule_len(schedule);
        assert_eq!(len, 3);
        let mut ts = vec![0.0f64; len];
        assert_eq!(
            jys_schedule_timesteps(schedule, ts.as_mut_ptr(), len),
            JysStatus::Ok
        );
        assert!(ts[0] > ts[1] && ts[1] > ts[2]);

        // Round-trip through the JSON contract.
        let json = jys_schedule_to_json(schedule, kernel, 7);
        assert!(!json.is_null());
        let parsed = jys_schedule_from_json(json);
        assert!(!parsed.is_null(), "{}", last_error());
        let mut ts2 = vec![0.0f64; jys_schedule_len(parsed)];
        assert_eq!(
            jys_schedule_timesteps(parsed, ts2.as_mut_ptr(), ts2.len()),
            JysStatus::Ok
        );
        assert_eq!(ts, ts2, "timesteps must round-trip bit-exactly");
        jys_string_free(json);
        jys_schedule_free(parsed);

        // Sample an ensemble and compute the quality metric.
        let ensemble = 64usize;
        let mut tokens = vec![0u32; ensemble * 8];
        assert_eq!(
            jys_sample_sequences(oracle, schedule, ensemble, 5, 0, tokens.as_mut_ptr(), tokens.len()),
            JysStatus::Ok,
            "{}",
            last_error()
        );
        assert!(tokens.iter().all(|&v| v < 8), "readout leaves no masks");
        let mut vr = f64::NAN;
        assert_eq!(
            jys_violation_rate(tokens.as_ptr(), ensemble, 8, 8, &mut vr),
            JysStatus::Ok
        );
        assert!((0.0..=1.0).contains(&vr));

        // KLUB estimate through the ABI.
        let (mut value, mut stderr) = (f64::NAN, f64::NAN);
        assert_eq!(
            jys_klub_refinement(oracle, 0.9, 0.5, 0.1, 64, 3, &mut value, &mut stderr),
            JysStatus::Ok
        );
        assert!(value.is_finite() && stderr >= 0.0);

        jys_schedule_free(schedule);
        jys_oracle_free(oracle);
        jys_data_free(data);
        jys_kernel_free(kernel);
    }
}

#[test]
fn error_paths_report_status_and_message() {
    unsafe {
        // Unknown family code.
        let bad = jys_kernel_new(9, 4, 1e-3, 1.0, 1.0, 3);
        assert!(bad.is_null());
        assert!(last_error().contains("family"));

        // Null pointers.
        let mut out = 0.0f64;
        assert_eq!(
            jys_violation_rate(std::ptr::null(), 1, 1, 2, &mut out),
            JysStatus::NullPointer
        );

        // Vocabulary mismatch between kernel and data.
        let kernel = jys_kernel_new(1, 5, 1e-3, 1.0, 1.0, 3);
        let data = jys_data_countdown(8, 8);
        let oracle = jys_oracle_new(kernel, data, 0.0);
        assert!(oracle.is_null());
        assert!(last_error().contains("incompatible"));
        jys_data_free(data);
        jys_kernel_free(kernel);

        // Bad JSON.
        let json = CString::new("not json").unwrap();
        assert!(jys_schedule_from_json(json.as_ptr()).is_null());
    }
}

#[test]
fn quick_verification_passes_through_the_abi() {
    assert_eq!(jys_verify_quick(), JysStatus::Ok, "{}", last_error());
}
