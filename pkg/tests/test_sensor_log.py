import math

import numpy as np
import pytest

from fgstate.se3 import Pose3, Rot3
from fgstate.sensor_log import (
    EncoderSample,
    GnssFix,
    GroundTruth,
    ImuSample,
    LidarOdom,
    LogFormatError,
    PointCloudWriter,
    Scenario,
    apply_scenario,
    order_events,
    parse_log,
    write_log,
)
from fgstate.state import ImuBias, NavState


def write(tmp_path, text):
    path = tmp_path / "log.txt"
    path.write_text(text)
    return path


class TestParse:
    def test_empty_file(self, tmp_path):
        assert parse_log(write(tmp_path, "")) == []

    def test_comments_and_blank_lines(self, tmp_path):
        assert parse_log(write(tmp_path, "# header\n\n   \n")) == []

    def test_two_imu_lines(self, tmp_path):
        evs = parse_log(write(tmp_path, "IMU 0.0 0 0 0 0 0 9.81\nIMU 0.01 0 0 0.1 0 0 9.81\n"))
        assert [type(e) for e in evs] == [ImuSample, ImuSample]
        assert [e.t for e in evs] == [0.0, 0.01]
        assert evs[1].gyro[2] == 0.1

    def test_interleaved_streams(self, tmp_path):
        text = "GNSS 0.1 front 1 2 3 0.01 0 0 0.01 0 0.01\nIMU 0.0 0 0 0 0 0 9.81\nIMU 0.1 0 0 0 0 0 9.81\nENC 0.05 2.0 0.1\n"
        evs = parse_log(write(tmp_path, text))
        assert [(type(e).__name__, e.t) for e in evs] == [
            ("ImuSample", 0.0),
            ("EncoderSample", 0.05),
            ("ImuSample", 0.1),
            ("GnssFix", 0.1),
        ]

    def test_malformed_line_number(self, tmp_path):
        path = write(tmp_path, "IMU 0.0 0 0 0 0 0 9.81\nIMU 0.01 0 0 0 zero 0 9.81\n")
        with pytest.raises(LogFormatError) as exc:
            parse_log(path)
        assert exc.value.line == 2

    @pytest.mark.parametrize(
        "line",
        [
            "IMU 0.0 0 0 0 0 0",
            "FOO 0.0 1 2",
            "IMU nan 0 0 0 0 0 9.81",
            "GNSS 0.0 left 1 2 3 1 0 0 1 0 1",
            "GNSS 0.0 front 1 2 3 1 5 0 1 0 1",
            "ENC 0.0 1.0 2.0",
            "IMU 0.0 0 0 0 0 0 500",
        ],
    )
    def test_rejects(self, tmp_path, line):
        with pytest.raises(LogFormatError) as exc:
            parse_log(write(tmp_path, line + "\n"))
        assert exc.value.line == 1

    def test_non_monotone_stream(self, tmp_path):
        path = write(tmp_path, "IMU 0.02 0 0 0 0 0 9.81\nENC 0.0 1 0\nIMU 0.01 0 0 0 0 0 9.81\n")
        with pytest.raises(LogFormatError) as exc:
            parse_log(path)
        assert exc.value.line == 3

    def test_two_gnss_antennas_may_share_timestamps(self, tmp_path):
        text = "GNSS 0.1 front 1 0 0 1 0 0 1 0 1\nGNSS 0.1 rear 0 0 0 1 0 0 1 0 1\n"
        assert len(parse_log(write(tmp_path, text))) == 2


def sample_events(tmp_path):
    rng = np.random.default_rng(0)
    cov = rng.normal(size=(3, 3))
    cov = cov @ cov.T
    with PointCloudWriter(tmp_path / "front.pcd.bin") as pcw:
        ref = pcw.write(0.1, "front", rng.normal(size=(20, 3)).astype(np.float32))
    state = NavState(0.3, rng.normal(size=3), Rot3.from_ypr(0.3, -0.1, 0.05), rng.normal(size=3), ImuBias(rng.normal(size=3) * 1e-3, rng.normal(size=3) * 1e-2))
    return [
        ImuSample(0.0, rng.normal(size=3), rng.normal(size=3) + [0, 0, 9.81]),
        ImuSample(0.01, rng.normal(size=3), rng.normal(size=3)),
        GnssFix(0.1, rng.normal(0, 1e4, 3), cov, "rear"),
        EncoderSample(1 / 3, 4.123456789, -0.2),
        LidarOdom(0.0, 0.1, Pose3(Rot3.from_ypr(0.01, 0.002, -0.003), (0.5, 0.01, -0.02)), np.eye(6) * 1e-4, "rear"),
        ref,
        GroundTruth(0.3, state),
    ]


def test_round_trip_is_bit_exact(tmp_path):
    events = order_events(sample_events(tmp_path))
    path = tmp_path / "out.txt"
    write_log(path, events, header="synthetic")
    back = parse_log(path)
    assert len(back) == len(events)
    for a, b in zip(events, back):
        assert type(a) is type(b) and a.t == b.t
        if isinstance(a, ImuSample):
            assert np.array_equal(a.gyro, b.gyro) and np.array_equal(a.accel, b.accel)
        elif isinstance(a, GnssFix):
            assert np.array_equal(a.position, b.position) and np.array_equal(a.position_cov, b.position_cov)
            assert a.sensor_id == b.sensor_id
        elif isinstance(a, EncoderSample):
            assert (a.v_x, a.steer) == (b.v_x, b.steer)
        elif isinstance(a, LidarOdom):
            assert a.t_prev == b.t_prev and a.delta.rotation.q == b.delta.rotation.q
            assert np.array_equal(a.delta.translation, b.delta.translation) and np.array_equal(a.covariance, b.covariance)
        elif isinstance(a, GroundTruth):
            sa, sb = a.state, b.state
            assert np.array_equal(sa.p, sb.p) and sa.R.q == sb.R.q and np.array_equal(sa.v, sb.v)
            assert np.array_equal(sa.bias.vector(), sb.bias.vector())
        else:
            assert np.array_equal(a.load().points, b.load().points)
    path2 = tmp_path / "again.txt"
    write_log(path2, back, header="synthetic")
    assert path.read_bytes() == path2.read_bytes()


def test_sort_is_stable_under_shuffle():
    rng = np.random.default_rng(1)
    events = [ImuSample(0.01 * k, np.zeros(3), np.zeros(3)) for k in range(50)]
    events += [EncoderSample(0.02 * k, 1.0, 0.0) for k in range(25)]
    events += [GnssFix(0.1 * k, np.zeros(3), np.eye(3), "front") for k in range(5)]
    ref = order_events(events)
    for _ in range(5):
        shuffled = list(events)
        rng.shuffle(shuffled)
        out = order_events(shuffled)
        assert [(type(e), e.t) for e in out] == [(type(e), e.t) for e in ref]
    assert all(a.t <= b.t for a, b in zip(ref, ref[1:]))


def fixes(n, dt=1.0):
    return [GnssFix(k * dt, [float(k), 0.0, 0.0], np.eye(3) * 1e-4, "front") for k in range(n)]


class TestScenario:
    def test_no_degradations_is_identity(self):
        stream = fixes(10) + [ImuSample(0.5, np.zeros(3), np.zeros(3))]
        out = apply_scenario(stream, Scenario())
        assert len(out) == len(stream)
        assert all(a is b for a, b in zip(out, stream))

    def test_outage_drops_fixes(self):
        out = apply_scenario(fixes(100), Scenario(gnss_outage=(60.0, math.inf)))
        times = [f.t for f in out]
        assert 75.0 not in times and 59.0 in times and len(out) == 60

    def test_cep_median_radial_error(self):
        base = [GnssFix(k * 0.1, np.zeros(3), np.eye(3) * 1e-4, "front") for k in range(10000)]
        out = apply_scenario(base, Scenario(gnss_noise_cep=2.0, rng_seed=3))
        radial = np.array([np.hypot(*f.position[:2]) for f in out])
        assert np.median(radial) == pytest.approx(2.0, rel=0.05)
        sigma = 2.0 / math.sqrt(2 * math.log(2))
        assert np.allclose(out[0].position_cov, np.eye(3) * sigma**2, rtol=1e-4)

    def test_seed_determinism(self):
        a = apply_scenario(fixes(50), Scenario(gnss_noise_cep=2.0, rng_seed=7))
        b = apply_scenario(fixes(50), Scenario(gnss_noise_cep=2.0, rng_seed=7))
        c = apply_scenario(fixes(50), Scenario(gnss_noise_cep=2.0, rng_seed=8))
        assert all(np.array_equal(x.position, y.position) for x, y in zip(a, b))
        assert not all(np.array_equal(x.position, y.position) for x, y in zip(a, c))

    def test_disabled_sensors(self):
        stream = fixes(3) + [EncoderSample(0.5, 1.0, 0.0), GnssFix(0.5, np.zeros(3), np.eye(3), "rear")]
        out = apply_scenario(order_events(stream), Scenario(disabled_sensors={"encoder", "gnss_rear"}))
        assert [type(e) for e in out] == [GnssFix] * 3
        assert all(e.sensor_id == "front" for e in out)

    def test_output_stays_ordered(self):
        stream = order_events(fixes(20, 0.1) + [ImuSample(0.01 * k, np.zeros(3), np.zeros(3)) for k in range(200)])
        out = apply_scenario(stream, Scenario(gnss_noise_cep=1.0, gnss_outage=(0.5, 1.0)))
        assert all(a.t <= b.t for a, b in zip(out, out[1:]))

    def test_invalid_outage(self):
        with pytest.raises(ValueError):
            Scenario(gnss_outage=(10.0, 5.0))
