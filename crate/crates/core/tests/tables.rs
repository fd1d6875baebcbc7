use trnet::arch::ArchSpec;
use trnet::cost::arch_cost;

fn load(name: &str) -> ArchSpec {
    ArchSpec::load(format!("{}/../../specs/{name}.json", env!("CARGO_MANIFEST_DIR"))).unwrap()
}

fn params(name: &str) -> (Vec<u64>, u64) {
    let cost = arch_cost(&load(name), 1, 1).unwrap();
    (cost.rows.iter().map(|r| r.params_r2).collect(), cost.total.params_r2)
}

#[test]
fn lenet300_parameter_coefficients() {
    assert_eq!(params("lenet300"), (vec![39, 31, 21], 91));
}

#[test]
fn lenet300_mac_coefficients() {
    let cost = arch_cost(&load("lenet300"), 1, 1).unwrap();
    let macs: Vec<(u64, u64)> = cost.rows.iter().map(|r| (r.macs_r3, r.macs_r2)).collect();
    assert_eq!(macs[0], (1177, 1084));
    assert_eq!(macs[1], (457, 400));
    // the last row is derived and differs from the published coefficients
    assert_eq!(macs[2], (130, 110));
    assert!(cost.rows[0].flags.is_empty() && cost.rows[1].flags.is_empty());
    assert_eq!(cost.rows[2].flags.len(), 2);
    assert_eq!(cost.rows[0].params_uncompressed, 784 * 300);
}

#[test]
fn lenet5_parameter_coefficients() {
    assert_eq!(params("lenet5"), (vec![19, 34, 46, 31], 130));
    let cost = arch_cost(&load("lenet5"), 1, 1).unwrap();
    // uncompressed convolution work at stride 1 with same padding
    assert_eq!(cost.rows[0].macs_uncompressed, 28 * 28 * 25 * 20);
    assert_eq!(cost.rows[1].macs_uncompressed, 10 * 10 * 25 * 20 * 50);
}

#[test]
fn resnet32_parameter_coefficients() {
    assert_eq!(params("resnet32"), (vec![20, 50, 200, 56, 232, 64, 264, 22], 908));
    let cost = arch_cost(&load("resnet32"), 1, 1).unwrap();
    let unc: Vec<u64> = cost
        .rows
        .iter()
        .map(|r| r.params_uncompressed + r.bias_params)
        .collect();
    assert_eq!(unc, vec![432, 4608, 18432, 13824, 73728, 55296, 294912, 650]);
}
