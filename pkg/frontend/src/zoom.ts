// Shared pan/zoom across the three image panes: one transform state,
// mirrored onto every registered element.

export interface Transform {
  scale: number;
  x: number;
  y: number;
}

const MIN_SCALE = 1.0;
const MAX_SCALE = 12.0;

export class ZoomSync {
  private transform: Transform = { scale: 1, x: 0, y: 0 };
  private targets: HTMLElement[] = [];
  private dragging = false;
  private last = { x: 0, y: 0 };

  register(element: HTMLElement): void {
    this.targets.push(element);
    this.apply();
  }

  reset(): void {
    this.transform = { scale: 1, x: 0, y: 0 };
    this.apply();
  }

  current(): Transform {
    return { ...this.transform };
  }

  /** Wheel zoom about the cursor position (element coordinates). */
  applyWheel(deltaY: number, cx: number, cy: number): void {
    const factor = Math.exp(-deltaY * 0.002);
    const next = Math.min(MAX_SCALE, Math.max(MIN_SCALE, this.transform.scale * factor));
    const ratio = next / this.transform.scale;
    this.transform = {
      scale: next,
      x: cx - ratio * (cx - this.transform.x),
      y: cy - ratio * (cy - this.transform.y),
    };
    if (next === MIN_SCALE) {
      this.transform.x = 0;
      this.transform.y = 0;
    }
    this.apply();
  }

  beginDrag(x: number, y: number): void {
    this.dragging = true;
    this.last = { x, y };
  }

  applyDrag(x: number, y: number): void {
    if (!this.dragging) {
      return;
    }
    this.transform = {
      ...this.transform,
      x: this.transform.x + (x - this.last.x),
      y: this.transform.y + (y - this.last.y),
    };
    this.last = { x, y };
    this.apply();
  }

  endDrag(): void {
    this.dragging = false;
  }

  bind(pane: HTMLElement): void {
    pane.addEventListener("wheel", (event) => {
      event.preventDefault();
      const rect = pane.getBoundingClientRect();
      this.applyWheel(event.deltaY, event.clientX - rect.left, event.clientY - rect.top);
    });
    pane.addEventListener("pointerdown", (event) => {
      pane.setPointerCapture(event.pointerId);
      this.beginDrag(event.clientX, event.clientY);
    });
    pane.addEventListener("pointermove", (event) => this.applyDrag(event.clientX, event.clientY));
    pane.addEventListener("pointerup", () => this.endDrag());
    pane.addEventListener("pointerleave", () => this.endDrag());
    pane.addEventListener("dblclick", () => this.reset());
  }

  private apply(): void {
    const { scale, x, y } = this.transform;
    for (const el of this.targets) {
      el.style.transform = `translate(${x}px, ${y}px) scale(${scale})`;
    }
  }
}
