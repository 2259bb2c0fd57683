// Log-scale IRQ-probability sparkline. Probabilities clamp at a visible
// floor so near-zero values still render as a flat baseline.

export const LOG_FLOOR = 1e-6;

export interface LogPoint {
  log10: number;
  clamped: boolean;
}

export function toLogPoints(
  probs: number[],
  floor: number = LOG_FLOOR,
): LogPoint[] {
  return probs.map((p) => {
    const clamped = p < floor;
    return { log10: Math.log10(clamped ? floor : p), clamped };
  });
}

// SVG path over a [0, width] x [0, height] box; log10 range maps
// [log10(floor), 0] onto [bottom, top].
export function sparklinePath(
  points: LogPoint[],
  width: number,
  height: number,
  floor: number = LOG_FLOOR,
): string {
  if (points.length === 0) return "";
  const lo = Math.log10(floor);
  const xStep = points.length > 1 ? width / (points.length - 1) : 0;
  const parts = points.map((pt, i) => {
    const x = i * xStep;
    const frac = (pt.log10 - lo) / (0 - lo);
    const y = height - frac * height;
    return `${i === 0 ? "M" : "L"}${x.toFixed(2)},${y.toFixed(2)}`;
  });
  return parts.join(" ");
}
