# web_server.py
# MIT License - See LICENSE for details
import queue
import time

from flask import Flask, Response, jsonify, render_template_string, request

from core.settings import AppConfig
from training.session import TrainingSession

app = Flask(__name__)

INDEX_HTML = """<!doctype html>
<html><head><meta charset="utf-8"><title>vHeat 训练监控</title></head>
<body>
<h3>vHeat 训练监控</h3>
<button onclick="toggle('start')">开始训练</button>
<button onclick="toggle('stop')">停止训练</button>
<span id="status"></span>
<pre id="log" style="height:60vh;overflow:auto;background:#111;color:#9f9"></pre>
<script>
function toggle(action) {
  fetch('/api/system/toggle', {method: 'POST', headers: {'Content-Type': 'application/json'},
                               body: JSON.stringify({action: action})});
}
const es = new EventSource('/api/logs');
es.onmessage = e => { const el = document.getElementById('log'); el.textContent += e.data + '\\n'; el.scrollTop = el.scrollHeight; };
setInterval(() => fetch('/api/system/status').then(r => r.json()).then(s => {
  document.getElementById('status').textContent = s.running ? '运行中 step ' + s.step : '空闲';
}), 2000);
</script>
</body></html>
"""


class WebState:
    def __init__(self):
        self.session = None
        self.log_queue = queue.Queue()
        self._config = None

    def bind(self, config: AppConfig):
        self._config = config
        config.log = self.log

    @property
    def config(self) -> AppConfig:
        if self._config is None:
            self.bind(AppConfig(log_callback=self.log))
        return self._config

    @property
    def running(self) -> bool:
        return bool(self.session and self.session.running)

    def log(self, message):
        timestamp = time.strftime("%H:%M:%S", time.localtime())
        self.log_queue.put(f"[{timestamp}] {message}")


state = WebState()


@app.route('/')
def index():
    return render_template_string(INDEX_HTML)


@app.route('/api/config', methods=['GET', 'POST'])
def handle_config():
    if request.method == 'GET':
        return jsonify(state.config.data)
    try:
        state.config.save(request.json or {})
    except (ValueError, TypeError, KeyError) as e:
        state.log(f"[错误] 配置无效: {e}")
        return jsonify({"status": "error", "message": str(e)}), 400
    state.log("[系统] 配置已通过 Web 保存")
    return jsonify({"status": "ok"})


@app.route('/api/system/toggle', methods=['POST'])
def toggle_system():
    data = request.json or {}
    action = data.get('action')
    try:
        if action == 'start' and not state.running:
            job = {k: data[k] for k in ("model", "dataset", "data_dir", "out") if k in data}
            state.session = TrainingSession(state.config.data, state.log, job)
            state.session.start()
            return jsonify({"status": "started"})

        if action == 'stop' and state.session:
            state.session.stop()
            return jsonify({"status": "stopped"})
    except Exception as e:
        state.log(f"[错误] 操作失败: {e}")
        return jsonify({"status": "error", "message": str(e)}), 500

    return jsonify({"status": "no_change"})


@app.route('/api/system/status', methods=['GET'])
def get_system_status():
    if state.session is None:
        return jsonify({"running": False, "step": 0, "error": None})
    s = state.session.status()
    return jsonify({k: s[k] for k in ("running", "step", "error", "elapsed", "last_loss")})


@app.route('/api/metrics', methods=['GET'])
def get_metrics():
    return jsonify(state.session.status()["metrics"] if state.session else [])


@app.route('/api/logs')
def stream_logs():
    def generate():
        while True:
            try:
                msg = state.log_queue.get(timeout=1)
                yield f"data: {msg}\n\n"
            except queue.Empty:
                yield ": keep-alive\n\n"
    return Response(generate(), mimetype='text/event-stream')


@app.route('/api/control/clear_log', methods=['POST'])
def clear_log():
    while not state.log_queue.empty():
        state.log_queue.get()
    return jsonify({"status": "ok"})


if __name__ == '__main__':
    web = state.config.section("web")
    app.run(host=web["host"], port=web["port"], threaded=True)
