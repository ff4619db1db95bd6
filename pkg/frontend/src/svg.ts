/** SVG backend: same layout as the PNG path, byte-stable output. */

import { Anchor, Canvas } from "./canvas.js";
import { Figure } from "./figures.js";
import { HEIGHT, WIDTH, drawFigure } from "./layout.js";

function r(v: number): string {
  return String(Math.round(v * 100) / 100);
}

function escapeXml(s: string): string {
  return s.replace(/&/g, "&amp;").replace(/</g, "&lt;").replace(/>/g, "&gt;");
}

export class SvgCanvas implements Canvas {
  private parts: string[] = [];

  constructor(width = WIDTH, height = HEIGHT) {
    this.parts.push(
      `<svg xmlns="http://www.w3.org/2000/svg" width="${width}" height="${height}" ` +
        `viewBox="0 0 ${width} ${height}" font-family="Helvetica, Arial, sans-serif">`,
      `<rect width="${width}" height="${height}" fill="white"/>`,
    );
  }

  line(x1: number, y1: number, x2: number, y2: number, color: string, width = 1): void {
    this.parts.push(
      `<line x1="${r(x1)}" y1="${r(y1)}" x2="${r(x2)}" y2="${r(y2)}" ` +
        `stroke="${color}" stroke-width="${width}"/>`,
    );
  }

  rect(x: number, y: number, w: number, h: number, color: string): void {
    if (h < 0) {
      y += h;
      h = -h;
    }
    this.parts.push(
      `<rect x="${r(x)}" y="${r(y)}" width="${r(w)}" height="${r(h)}" fill="${color}"/>`,
    );
  }

  circle(cx: number, cy: number, radius: number, color: string): void {
    this.parts.push(
      `<circle cx="${r(cx)}" cy="${r(cy)}" r="${radius}" fill="${color}" stroke="#333333"/>`,
    );
  }

  polygon(points: Array<[number, number]>, color: string, opacity = 1): void {
    const pts = points.map(([x, y]) => `${r(x)},${r(y)}`).join(" ");
    this.parts.push(`<polygon points="${pts}" fill="${color}" fill-opacity="${opacity}"/>`);
  }

  polyline(points: Array<[number, number]>, color: string, width = 1.5): void {
    const pts = points.map(([x, y]) => `${r(x)},${r(y)}`).join(" ");
    this.parts.push(
      `<polyline points="${pts}" fill="none" stroke="${color}" stroke-width="${width}"/>`,
    );
  }

  text(x: number, y: number, content: string, size = 11, anchor: Anchor = "start",
       color = "#333333"): void {
    this.parts.push(
      `<text x="${r(x)}" y="${r(y)}" font-size="${size}" text-anchor="${anchor}" ` +
        `fill="${color}">${escapeXml(content)}</text>`,
    );
  }

  finish(): string {
    return this.parts.join("\n") + "\n</svg>\n";
  }
}

export function renderSvg(figure: Figure): string {
  const canvas = new SvgCanvas();
  drawFigure(canvas, figure);
  return canvas.finish();
}
