from setuptools import setup, find_packages

setup(
    name="vheat-desk",
    version="0.1.0",
    description="vHeat heat-conduction vision backbone on CPU (numpy)",
    packages=find_packages(exclude=("tests", "examples", "examples.*")),
    py_modules=["main", "web_server"],
    python_requires=">=3.9",
    install_requires=["numpy>=1.22", "flask"],
    extras_require={"png": ["Pillow"], "test": ["pytest"]},
    entry_points={"console_scripts": ["vheat=main:main"]},
)
