// Session flow: iterate ungraded items in server order, submit each
// grade exactly once per user action, and lean on the server for truth
// (409 means the grade is already in; a network failure parks the grade
// for an explicit retry).

import { Api, ApiSession, RubricRow } from "./api.js";

export interface FlowState {
  phase: "loading" | "rating" | "complete" | "empty" | "error";
  session: ApiSession | null;
  rubric: RubricRow[];
  index: number; // position in server order
  selectedGrade: number | null;
  comment: string;
  submitting: boolean;
  retryPending: { itemId: string; grade: number; comment: string } | null;
  notice: string | null;
  gradedCount: number;
}

type Listener = (state: FlowState) => void;

export class SessionFlow {
  private state: FlowState = {
    phase: "loading",
    session: null,
    rubric: [],
    index: 0,
    selectedGrade: null,
    comment: "",
    submitting: false,
    retryPending: null,
    notice: null,
    gradedCount: 0,
  };
  private listeners: Listener[] = [];

  constructor(private api: Api) {}

  subscribe(listener: Listener): void {
    this.listeners.push(listener);
    listener(this.state);
  }

  snapshot(): FlowState {
    return this.state;
  }

  private patch(update: Partial<FlowState>): void {
    this.state = { ...this.state, ...update };
    for (const listener of this.listeners) {
      listener(this.state);
    }
  }

  private firstUngraded(session: ApiSession): number {
    const i = session.items.findIndex((item) => !item.graded);
    return i < 0 ? session.items.length : i;
  }

  /** Load the rubric and the first open session; resumes at the first
   * ungraded item so a mid-session refresh loses nothing. */
  async start(): Promise<void> {
    try {
      const rubric = await this.api.rubric();
      const open = await this.api.openSessions();
      if (open.length === 0) {
        this.patch({ phase: "empty", rubric });
        return;
      }
      const session = await this.api.session(open[0]);
      const index = this.firstUngraded(session);
      this.patch({
        phase: index >= session.items.length ? "complete" : "rating",
        session,
        rubric,
        index,
        gradedCount: session.items.filter((i) => i.graded).length,
      });
    } catch (err) {
      this.patch({ phase: "error", notice: String(err) });
    }
  }

  currentItem() {
    const { session, index } = this.state;
    if (!session || index >= session.items.length) {
      return null;
    }
    return session.items[index];
  }

  /** Grade selection accepts integers 0..5 only; anything else is a no-op. */
  selectGrade(grade: number): void {
    if (!Number.isInteger(grade) || grade < 0 || grade > 5) {
      return;
    }
    if (this.state.phase !== "rating" || this.state.submitting) {
      return;
    }
    this.patch({ selectedGrade: grade });
  }

  setComment(comment: string): void {
    this.patch({ comment });
  }

  private advance(notice: string | null = null): void {
    const session = this.state.session!;
    const item = session.items[this.state.index];
    item.graded = true;
    const gradedCount = session.items.filter((i) => i.graded).length;
    const index = this.firstUngraded(session);
    this.patch({
      session,
      index,
      gradedCount,
      selectedGrade: null,
      comment: "",
      submitting: false,
      retryPending: null,
      notice,
      phase: index >= session.items.length ? "complete" : "rating",
    });
  }

  /** Submit the selected grade for the current item (exactly one POST). */
  async submit(): Promise<void> {
    const item = this.currentItem();
    const grade = this.state.selectedGrade;
    if (!item || grade === null || this.state.submitting || this.state.retryPending) {
      return;
    }
    this.patch({ submitting: true, notice: null });
    const result = await this.api.submitGrade(
      this.state.session!.sessionId,
      item.itemId,
      grade,
      this.state.comment || undefined,
    );
    this.afterSubmit(item.itemId, grade, result);
  }

  /** Resubmit only the parked grade after a network failure. */
  async retry(): Promise<void> {
    const pending = this.state.retryPending;
    if (!pending || this.state.submitting) {
      return;
    }
    this.patch({ submitting: true, notice: null });
    const result = await this.api.submitGrade(
      this.state.session!.sessionId,
      pending.itemId,
      pending.grade,
      pending.comment || undefined,
    );
    this.afterSubmit(pending.itemId, pending.grade, result);
  }

  private afterSubmit(
    itemId: string,
    grade: number,
    result: { kind: string; detail?: string },
  ): void {
    switch (result.kind) {
      case "ok":
        this.advance();
        return;
      case "conflict":
        // server already holds a grade for this item: trust it and move on
        this.advance("A grade was already recorded for that item; continuing.");
        return;
      case "network":
        this.patch({
          submitting: false,
          retryPending: { itemId, grade, comment: this.state.comment },
          notice: "Network failure; the grade was not lost. Retry to resubmit it.",
        });
        return;
      default:
        this.patch({
          submitting: false,
          notice: result.detail ?? "The service rejected the grade.",
        });
    }
  }
}
