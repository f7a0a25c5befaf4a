#!/usr/bin/env python3
"""
Быстрая калибровка генератора
Одна выборка при эталонных значениях, сравнение числа переходов с ожидаемым
"""

import math
import sys
import time

from jmstate import create_logger
from jmstate.msprep import upsilon_matrix
from jmstate.simulate import reference_design, simulate_dataset

# (из, в): ожидаемое число при 1500 субъектах
EXPECTED = {
    (0, 1): 500,
    (0, 2): 308,
    (1, 2): 287,
    (0, 0): 692,
    (1, 1): 213,
    (2, 2): 595,
}


def check_counts(upsilon, expected=EXPECTED):
    """Отклонения от ожидаемых чисел в пределах 3 sqrt(n)"""
    results = []
    for (h, k), target in expected.items():
        observed = int(upsilon[h][k])
        tolerance = 3.0 * math.sqrt(target)
        results.append({
            'cell': f"{h}->{k}" if h != k else f"final {h}",
            'observed': observed,
            'expected': target,
            'tolerance': tolerance,
            'success': abs(observed - target) <= tolerance,
        })
    return results


def main(n_subjects=1500, seed=0):
    print("🔥 БЫСТРАЯ КАЛИБРОВКА ГЕНЕРАТОРА")
    print("=" * 50)
    print(f"Субъектов: {n_subjects}, seed: {seed}")
    print(f"Время: {time.strftime('%H:%M:%S')}")
    print()

    start_time = time.time()
    dataset, truth = simulate_dataset(reference_design(n_subjects, seed))
    upsilon = upsilon_matrix(dataset)
    print(f"⏱️  Генерация: {time.time() - start_time:.1f} с")
    print(f"   Невязка обращения: {truth['max_inversion_residual']:.2e}")
    print()

    print("📊 Матрица переходов:")
    for h, row in enumerate(upsilon):
        print(f"   {h}: {list(int(v) for v in row)}")
    print()

    results = check_counts(upsilon) if n_subjects == 1500 else []
    for r in results:
        mark = "✅" if r['success'] else "❌"
        print(f"   {mark} {r['cell']}: {r['observed']} (ожидалось {r['expected']} ± {r['tolerance']:.0f})")

    failed = [r for r in results if not r['success']]
    print(f"\n✅ Калибровка завершена!" if not failed else f"\n⚠️  Вне допуска: {len(failed)}")
    return 0 if not failed else 1


if __name__ == '__main__':
    create_logger()
    sys.exit(main())
