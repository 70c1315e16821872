//! Reference values computed once with 40-digit arbitrary-precision arithmetic and frozen here.

use deliberate::draws::inverse_normal_cdf;
use deliberate::model::{decay, ordered_probs};
use deliberate::reporting::paired_t_test;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

#[test]
fn normal_quantiles() {
    let cases = [
        (1e-10, -6.361_340_902_404_056_2),
        (0.001, -3.090_232_306_167_813_5),
        (0.02, -2.053_748_910_631_823_1),
        (0.1, -1.281_551_565_544_600_5),
        (0.5, 0.0),
        (0.7, 0.524_400_512_708_040_78),
        (0.975, 1.959_963_984_540_054_2),
        (0.999_999, 4.753_424_308_817_088), // at the double nearest 0.999999
    ];
    for (u, z) in cases {
        let got = inverse_normal_cdf(u).unwrap();
        assert!(close(got, z, 1e-13), "u={u}: {got} vs {z}");
    }
}

#[test]
fn decay_values() {
    let cases = [
        (1.0, 5.6667, 17.0, 0.020_617_938_691_078_626),
        (8.0, 119.17, 17.0, 0.998_032_735_167_984_5),
        (13.0, 6.48, 17.0, 0.710_275_129_695_391_1),
        (16.5, 2.0, 17.0, 0.979_397_707_875_080_5),
        (3.0, 0.5, 10.0, 0.021_200_610_785_643_444),
    ];
    for (delta, alpha, horizon, d) in cases {
        let got = decay(delta, alpha, horizon).unwrap();
        assert!(close(got, d, 1e-13), "d({delta}; {alpha}, {horizon}) = {got}, want {d}");
    }
}

#[test]
fn category_probabilities() {
    let tau = [-3.0, -2.2, -1.5, -0.7, 0.0, 0.4, 1.1, 1.9, 2.5, 3.6];
    let cases: [(f64, [f64; 11]); 3] = [
        (
            0.3,
            [
                0.035_571_189_272_636_17, 0.040_286_990_748_607_37, 0.065_992_884_879_244_25, 0.127_090_356_469_507_34,
                0.156_616_061_818_345_88, 0.099_421_704_290_598_98, 0.164_995_293_648_672_47, 0.142_043_904_006_312,
                0.068_231_125_746_390_38, 0.064_179_299_847_048_98, 0.035_571_189_272_636_17,
            ],
        ),
        (
            -4.0,
            [
                0.731_058_578_630_004_9, 0.127_090_356_469_507_3, 0.065_992_884_879_244_26, 0.040_286_990_748_607_38,
                0.017_584_979_310_544_613, 0.005_857_774_977_817_318_5, 0.006_068_633_492_690_126, 0.003_327_840_728_573_053,
                0.001_230_778_506_274_068_8, 0.001_000_981_149_657_427_4, 0.000_500_201_107_079_564_1,
            ],
        ),
        (
            7.5,
            [
                2.753_569_111_458_347e-5, 3.374_404_850_201_896e-5, 6.211_483_636_962_93e-5, 1.511_835_801_151_01e-4,
                2.782_004_808_222_668e-4, 2.716_460_494_746_956e-4, 8.343_763_937_761_27e-4, 2.025_438_819_261_565_4e-3,
                3.008_611_024_848_868e-3, 1.314_745_480_979_265_3e-2, 0.980_159_694_265_922_5,
            ],
        ),
    ];
    for (v, want) in cases {
        let got = ordered_probs(v, &tau).unwrap();
        for (r, (g, w)) in got.iter().zip(&want).enumerate() {
            assert!((g - w).abs() <= 1e-14 + 1e-11 * w, "V={v} r={r}: {g} vs {w}");
        }
    }
}

#[test]
fn paired_t_values() {
    let cases: [(&[f64], f64, f64); 4] = [
        (&[2.0, 1.0, 3.0], 3.464_101_615_137_754_6, 0.074_179_900_227_448_54),
        (&[0.5, -0.25, 1.5, 2.0, 0.75], 2.295_276_167_028_018, 0.083_371_289_117_436_89),
        (&[1.0, -1.0, 2.0, -2.0, 3.0, 0.5, 0.25, -0.125], 0.806_311_382_332_440_8, 0.446_587_042_621_455_7),
        (&[-3.0, -2.5, -4.0, -1.0, -2.0, -3.5], -6.047_431_568_147_636, 0.001_782_165_487_530_293_6),
    ];
    for (d, t, p) in cases {
        let r = paired_t_test(d).unwrap();
        assert!(close(r.t, t, 1e-13), "{d:?}: t {} vs {t}", r.t);
        assert!((r.p - p).abs() < 1e-12, "{d:?}: p {} vs {p}", r.p);
    }
}
