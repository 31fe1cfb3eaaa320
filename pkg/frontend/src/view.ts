// DOM rendering and input wiring for the rating screen.

import { FlowState, SessionFlow } from "./state.js";
import { ZoomSync } from "./zoom.js";

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) {
    node.className = className;
  }
  if (text !== undefined) {
    node.textContent = text;
  }
  return node;
}

export class RatingView {
  private root: HTMLElement;
  private zoom = new ZoomSync();
  private lastItemId: string | null = null;

  constructor(
    root: HTMLElement,
    private flow: SessionFlow,
  ) {
    this.root = root;
    document.addEventListener("keydown", (event) => this.onKey(event));
    flow.subscribe((state) => this.render(state));
  }

  private onKey(event: KeyboardEvent): void {
    if (event.target instanceof HTMLTextAreaElement) {
      return;
    }
    if (/^[0-9]$/.test(event.key)) {
      this.flow.selectGrade(parseInt(event.key, 10)); // 6..9 are no-ops
    } else if (event.key === "Enter") {
      void this.flow.submit();
    }
  }

  private render(state: FlowState): void {
    this.root.textContent = "";
    switch (state.phase) {
      case "loading":
        this.root.appendChild(el("p", "status", "Loading session..."));
        return;
      case "empty":
        this.root.appendChild(el("p", "status", "No open rating sessions."));
        return;
      case "error":
        this.root.appendChild(el("p", "status error", state.notice ?? "Failed to load."));
        return;
      case "complete":
        this.renderComplete(state);
        return;
      case "rating":
        this.renderItem(state);
    }
  }

  private renderComplete(state: FlowState): void {
    const box = el("div", "complete-screen");
    box.appendChild(el("h2", undefined, "Session complete"));
    const n = state.session?.items.length ?? 0;
    box.appendChild(el("p", undefined, `All ${n} items graded. Thank you.`));
    this.root.appendChild(box);
  }

  private renderItem(state: FlowState): void {
    const session = state.session!;
    const item = session.items[state.index];
    if (item.itemId !== this.lastItemId) {
      this.zoom = new ZoomSync();
      this.lastItemId = item.itemId;
    }

    const header = el("header", "topbar");
    header.appendChild(el("span", "badge class-badge", item.classLabel));
    header.appendChild(
      el("span", "progress", `${state.gradedCount} / ${session.items.length} graded`),
    );
    this.root.appendChild(header);

    const panes = el("div", "panes");
    const paneDefs: Array<[string, string]> = [
      ["Original", item.originalUrl],
      ["Segmentation", item.segmentationUrl],
      ["Explanation", item.explanationUrl],
    ];
    for (const [title, url] of paneDefs) {
      const pane = el("figure", "pane");
      pane.appendChild(el("figcaption", undefined, title));
      const holder = el("div", "pane-image");
      const img = el("img");
      img.src = url;
      img.draggable = false;
      holder.appendChild(img);
      pane.appendChild(holder);
      panes.appendChild(pane);
      this.zoom.register(img);
      this.zoom.bind(holder);
    }
    this.root.appendChild(panes);

    const rubric = el("aside", "rubric");
    rubric.appendChild(el("h3", undefined, "Rubric"));
    const list = el("ol", "rubric-list");
    list.start = 0;
    for (const row of state.rubric) {
      const li = el("li", "rubric-row");
      li.appendChild(el("b", undefined, `${row.grade}`));
      li.appendChild(el("span", undefined, ` ${row.criterion}`));
      list.appendChild(li);
    }
    rubric.appendChild(list);
    this.root.appendChild(rubric);

    const controls = el("div", "controls");
    const grades = el("div", "grade-buttons");
    for (let g = 0; g <= 5; g++) {
      const button = el("button", "grade-button", String(g));
      button.dataset.grade = String(g);
      if (state.selectedGrade === g) {
        button.classList.add("selected");
      }
      button.addEventListener("click", () => this.flow.selectGrade(g));
      grades.appendChild(button);
    }
    controls.appendChild(grades);

    const comment = el("textarea", "comment-box") as HTMLTextAreaElement;
    comment.placeholder = "Optional comment";
    comment.value = state.comment;
    comment.addEventListener("input", () => this.flow.setComment(comment.value));
    controls.appendChild(comment);

    const submit = el("button", "submit-button", state.submitting ? "Submitting..." : "Submit");
    submit.disabled =
      state.selectedGrade === null || state.submitting || state.retryPending !== null;
    submit.addEventListener("click", () => void this.flow.submit());
    controls.appendChild(submit);

    if (state.retryPending) {
      const banner = el("div", "retry-banner");
      banner.appendChild(el("span", undefined, state.notice ?? "Network failure."));
      const retry = el("button", "retry-button", "Retry");
      retry.addEventListener("click", () => void this.flow.retry());
      banner.appendChild(retry);
      controls.appendChild(banner);
    } else if (state.notice) {
      controls.appendChild(el("div", "notice", state.notice));
    }
    this.root.appendChild(controls);
  }
}
