"""Smoke test for the tiletensor_py extension module.

Build and install first, e.g. `maturin develop -m crates/py/Cargo.toml`.
"""

import tiletensor_py as tt


def main():
    assert tt.canonical_shape("[4, 3/8, 5/16]") == "[4,3/8,5/16]"
    assert tt.external_shape("[5/2,6/4]") == [3, 2]
    assert [tt.sum_shape("[4,3/8,5/16]", d) for d in (1, 2, 3)] == [
        "[1,3/8,5/16]",
        "[4,*/8,5/16]",
        "[4,3/8,1?/16]",
    ]
    assert tt.elementwise_shape("[18/8,4/16]", "[*/8,4/16]", "add") == "[18?/8,4/16]"
    try:
        tt.canonical_shape("[4,3/x]")
    except ValueError:
        pass
    else:
        raise AssertionError("malformed shape accepted")

    assert tt.rotations(1190, "ltr") == 14
    assert tt.rotations(1190, "rtl") == 14
    assert tt.rotations(2048) == 11

    groups = [(32, 3, 50, 18), (32, 5, 50, 16)]
    assert tt.bootstrap_lower_bound(groups, 3) == 1088
    assert tt.bootstrap_lower_bound(groups, 4) == 816

    values = [float(10 * r + c) for r in range(5) for c in range(6)]
    tiles, back = tt.pack_unpack(values, [5, 6], "[5/2,6/4]", 8)
    assert len(tiles) == 6 and back == values

    rows, cost = tt.matmul([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]], [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]], (2, 4, 2))
    assert rows == [[4.0, 5.0], [10.0, 11.0]], rows
    assert cost["multiplications"] > 0

    counts = tt.cryptonets_counts()
    assert (counts["multiplications"], counts["rotations"], counts["additions"]) == (32, 89, 113), counts
    print("smoke test passed")


if __name__ == "__main__":
    main()
