/** Backend-agnostic drawing surface; SVG and PNG render the same layout. */

export type Anchor = "start" | "middle" | "end";

export interface Canvas {
  line(x1: number, y1: number, x2: number, y2: number, color: string, width?: number): void;
  rect(x: number, y: number, w: number, h: number, color: string): void;
  circle(cx: number, cy: number, r: number, color: string): void;
  polygon(points: Array<[number, number]>, color: string, opacity?: number): void;
  polyline(points: Array<[number, number]>, color: string, width?: number): void;
  text(x: number, y: number, content: string, size?: number, anchor?: Anchor, color?: string): void;
}
